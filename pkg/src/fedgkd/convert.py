"""Converters that write the canonical dataset directory.

``planetoid-raw`` reads the pickled citation-network distribution
(``ind.<name>.x/tx/allx/y/ty/ally/graph`` plus ``ind.<name>.test.index``),
restricts to the largest connected component, and re-samples train/val/test
masks at the 0.3/0.35/0.35 ratios. ``edge-list`` ingests a plain
``u v``-per-line file with optional sibling label/feature files.
"""

from __future__ import annotations

import pickle
from collections import deque
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from fedgkd.graphs import Graph, canonical_edges, sample_masks, save_dataset
from fedgkd.seeding import TAG_MASKS, derive_rng


class ConversionError(ValueError):
    """Source data could not be parsed."""


def largest_connected_component(num_nodes: int, edges: np.ndarray) -> np.ndarray:
    """Sorted node ids of the largest component (ties broken by smallest seed node)."""
    adj: list[list[int]] = [[] for _ in range(num_nodes)]
    for u, v in edges:
        adj[u].append(int(v))
        adj[v].append(int(u))
    seen = np.zeros(num_nodes, dtype=bool)
    best: list[int] = []
    for start in range(num_nodes):
        if seen[start]:
            continue
        comp = [start]
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in adj[v]:
                if not seen[u]:
                    seen[u] = True
                    comp.append(u)
                    queue.append(u)
        if len(comp) > len(best):
            best = comp
    return np.sort(np.asarray(best, dtype=np.int64))


def _load_pickle(path: Path):
    with path.open("rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid_raw(src: str | Path, dst: str | Path, name: str, mask_seed: int = 0) -> Graph:
    """Convert a raw citation-network directory; keeps the largest component."""
    src = Path(src)
    required = [f"ind.{name}.{part}" for part in
                ("x", "y", "tx", "ty", "allx", "ally", "graph", "test.index")]
    for fname in required:
        if not (src / fname).is_file():
            raise ConversionError(f"missing source file: {fname}")
    try:
        allx = _load_pickle(src / f"ind.{name}.allx")
        tx = _load_pickle(src / f"ind.{name}.tx")
        ally = np.asarray(_load_pickle(src / f"ind.{name}.ally"))
        ty = np.asarray(_load_pickle(src / f"ind.{name}.ty"))
        graph = _load_pickle(src / f"ind.{name}.graph")
    except Exception as exc:
        raise ConversionError(f"failed to unpickle {name} sources: {exc}") from exc

    test_idx = []
    with (src / f"ind.{name}.test.index").open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                test_idx.append(int(line))
            except ValueError as exc:
                raise ConversionError(f"ind.{name}.test.index:{lineno}: not an integer") from exc
    test_idx = np.asarray(test_idx, dtype=np.int64)

    # test rows arrive shuffled; scatter them to their true positions and
    # fill any index gaps (isolated test nodes) with zero rows
    span = np.arange(test_idx.min(), test_idx.max() + 1)
    features = sp.vstack((sp.csr_matrix(allx), sp.csr_matrix(tx))).tolil()
    labels_onehot = np.vstack((ally, ty))
    n_total = int(allx.shape[0] + len(span))
    feat_full = sp.lil_matrix((n_total, features.shape[1]))
    feat_full[: allx.shape[0]] = features[: allx.shape[0]]
    lab_full = np.zeros((n_total, labels_onehot.shape[1]))
    lab_full[: ally.shape[0]] = labels_onehot[: ally.shape[0]]
    feat_full[test_idx] = features[allx.shape[0] : allx.shape[0] + len(test_idx)]
    lab_full[test_idx] = labels_onehot[ally.shape[0] : ally.shape[0] + len(test_idx)]

    pairs = []
    for u, nbrs in graph.items():
        for v in nbrs:
            if 0 <= int(u) < n_total and 0 <= int(v) < n_total:
                pairs.append((int(u), int(v)))
    edges = canonical_edges(np.asarray(pairs, dtype=np.int64))

    keep = largest_connected_component(n_total, edges)
    remap = np.full(n_total, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    kept_edges = edges[(remap[edges[:, 0]] >= 0) & (remap[edges[:, 1]] >= 0)]
    kept_edges = canonical_edges(remap[kept_edges])

    dense_features = np.asarray(feat_full.tocsr()[keep].todense(), dtype=np.float64)
    labels = lab_full[keep].argmax(axis=1).astype(np.int64)
    num_classes = labels_onehot.shape[1]

    rng = derive_rng(mask_seed, TAG_MASKS)
    train, val, test = sample_masks(len(keep), rng)
    out = Graph(
        num_nodes=len(keep),
        edges=kept_edges,
        features=dense_features,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        num_classes=num_classes,
    )
    save_dataset(out, dst)
    return out


def convert_edge_list(
    src: str | Path,
    dst: str | Path,
    labels_file: str | Path | None = None,
    features_file: str | Path | None = None,
    mask_seed: int = 0,
) -> Graph:
    """Convert a plain ``u v`` edge list.

    Labels default to a single class and features to the node degree when
    no sibling files are supplied; masks are re-sampled at 0.3/0.35/0.35.
    """
    src = Path(src)
    if not src.is_file():
        raise ConversionError(f"edge list not found: {src}")
    pairs = []
    with src.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConversionError(f"{src.name}:{lineno}: expected 'u v'")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise ConversionError(f"{src.name}:{lineno}: non-integer node id") from exc
    if not pairs:
        raise ConversionError(f"{src.name}: no edges found")
    arr = np.asarray(pairs, dtype=np.int64)
    if arr.min() < 0:
        raise ConversionError(f"{src.name}: negative node id")
    num_nodes = int(arr.max()) + 1
    edges = canonical_edges(arr)

    if labels_file is not None:
        labels = np.loadtxt(labels_file, dtype=np.int64, ndmin=1)
        if labels.shape[0] != num_nodes:
            raise ConversionError(
                f"labels file has {labels.shape[0]} rows, edge list implies {num_nodes} nodes"
            )
        num_classes = int(labels.max()) + 1
    else:
        labels = np.zeros(num_nodes, dtype=np.int64)
        num_classes = 1

    if features_file is not None:
        features = np.loadtxt(features_file, delimiter=",", dtype=np.float64, ndmin=2)
        if features.shape[0] != num_nodes:
            raise ConversionError(
                f"features file has {features.shape[0]} rows, edge list implies {num_nodes} nodes"
            )
    else:
        deg = np.zeros(num_nodes)
        np.add.at(deg, edges[:, 0], 1.0)
        np.add.at(deg, edges[:, 1], 1.0)
        features = deg[:, None]

    rng = derive_rng(mask_seed, TAG_MASKS)
    train, val, test = sample_masks(num_nodes, rng)
    out = Graph(
        num_nodes=num_nodes,
        edges=edges,
        features=features,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        num_classes=num_classes,
    )
    save_dataset(out, dst)
    return out
