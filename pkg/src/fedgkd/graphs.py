"""Graph containers, dataset IO, symmetric normalization, and SBM fixtures.

Graphs are undirected and immutable: edges are stored once per unordered
pair with ``u < v``, self-loops are dropped, and features/labels/masks are
plain numpy arrays marked read-only after validation.

The on-disk dataset format is a directory with four text files
(``edges.tsv``, ``features.csv``, ``labels.csv``, ``masks.csv``) plus an
optional ``meta.json`` declaring the number of classes. All numbers use
'.' decimals and 0-based node indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from fedgkd.seeding import TAG_MASKS, TAG_SBM, derive_rng

# train/val/test fractions used when sampling masks for synthetic graphs
MASK_RATIOS = (0.3, 0.35, 0.35)


class DatasetError(ValueError):
    """An on-disk dataset directory failed validation."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Graph:
    """Undirected graph with dense node features, labels and split masks.

    Invariants enforced at construction: every edge endpoint is a valid
    node index, each unordered pair appears at most once (stored with
    ``u < v``), masks are pairwise disjoint, and labels lie in
    ``[0, num_classes)``. Masks need not cover all nodes.
    """

    num_nodes: int
    edges: np.ndarray  # [E, 2] int64 with u < v, unique rows
    features: np.ndarray  # [N, D] float64
    labels: np.ndarray  # [N] int64
    train_mask: np.ndarray  # [N] bool
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        n = self.num_nodes
        if n < 1:
            raise ValueError("graph must have at least one node")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValueError("edge endpoint out of range")
            if not (edges[:, 0] < edges[:, 1]).all():
                raise ValueError("edges must be stored with u < v (no self-loops)")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValueError("duplicate undirected edge")
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError(f"features must have {n} rows")
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if labels.shape[0] != n:
            raise ValueError("labels length mismatch")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool).ravel()
            if m.shape[0] != n:
                raise ValueError(f"{name} length mismatch")
            masks.append(m)
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
            raise ValueError("masks overlap")
        object.__setattr__(self, "edges", _freeze(edges))
        object.__setattr__(self, "features", _freeze(features))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "train_mask", _freeze(masks[0]))
        object.__setattr__(self, "val_mask", _freeze(masks[1]))
        object.__setattr__(self, "test_mask", _freeze(masks[2]))

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def degrees(self) -> np.ndarray:
        """Undirected degree of every node (self-loops are not stored)."""
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        if self.edges.size:
            np.add.at(deg, self.edges[:, 0], 1)
            np.add.at(deg, self.edges[:, 1], 1)
        return deg


def canonical_edges(pairs: Sequence[Sequence[int]] | np.ndarray) -> np.ndarray:
    """Deduplicate raw pairs into the canonical ``u < v`` edge array.

    Self-loops are dropped; both orientations of a pair collapse to one row.
    """
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    keep = lo != hi
    stacked = np.stack([lo[keep], hi[keep]], axis=1)
    if stacked.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(stacked, axis=0)


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Subgraph on ``nodes`` (re-indexed to 0..len-1), keeping intra edges only."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(np.unique(nodes)) != len(nodes):
        raise ValueError("node selection contains duplicates")
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    if g.edges.size:
        inside = (remap[g.edges[:, 0]] >= 0) & (remap[g.edges[:, 1]] >= 0)
        sub_edges = canonical_edges(remap[g.edges[inside]])
    else:
        sub_edges = np.zeros((0, 2), dtype=np.int64)
    return Graph(
        num_nodes=len(nodes),
        edges=sub_edges,
        features=g.features[nodes].copy(),
        labels=g.labels[nodes].copy(),
        train_mask=g.train_mask[nodes].copy(),
        val_mask=g.val_mask[nodes].copy(),
        test_mask=g.test_mask[nodes].copy(),
        num_classes=g.num_classes,
    )


# ---------------------------------------------------------------------------
# dataset directory IO
# ---------------------------------------------------------------------------


def _read_edges(path: Path, num_nodes: int) -> np.ndarray:
    pairs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path.name}:{lineno}: expected two node indices")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DatasetError(f"{path.name}:{lineno}: non-integer node index") from exc
            if u < 0 or v < 0 or u >= num_nodes or v >= num_nodes:
                raise DatasetError(f"{path.name}:{lineno}: node index out of range")
            pairs.append((u, v))
    return canonical_edges(np.asarray(pairs, dtype=np.int64)) if pairs else np.zeros((0, 2), dtype=np.int64)


def _read_masks(path: Path) -> np.ndarray:
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and parts and not parts[0].lstrip("-").isdigit():
                continue  # header row
            if len(parts) != 3:
                raise DatasetError(f"{path.name}:{lineno}: expected three 0/1 columns")
            try:
                row = [int(p) for p in parts]
            except ValueError as exc:
                raise DatasetError(f"{path.name}:{lineno}: non-integer mask value") from exc
            if any(v not in (0, 1) for v in row):
                raise DatasetError(f"{path.name}:{lineno}: mask values must be 0 or 1")
            rows.append(row)
    return np.asarray(rows, dtype=bool)


def load_dataset(path: str | Path) -> Graph:
    """Load a canonical dataset directory into a :class:`Graph`.

    Expects ``edges.tsv`` (two whitespace-separated 0-based node indices per
    line), ``features.csv`` (one comma-separated row per node),
    ``labels.csv`` (one integer per line) and ``masks.csv``
    (``train,val,test`` columns of 0/1, optional header). A ``meta.json``
    with ``num_classes`` pins the class count; otherwise it is inferred as
    ``max(label) + 1``. Duplicate and reversed edge lines collapse to one
    stored edge; self-loops are dropped.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset directory not found: {path}")
    for fname in ("edges.tsv", "features.csv", "labels.csv", "masks.csv"):
        if not (path / fname).is_file():
            raise DatasetError(f"missing dataset file: {fname}")

    try:
        features = np.loadtxt(path / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"features.csv: {exc}") from exc
    num_nodes = features.shape[0]

    try:
        labels = np.loadtxt(path / "labels.csv", dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise DatasetError(f"labels.csv: {exc}") from exc
    if labels.shape[0] != num_nodes:
        raise DatasetError(
            f"labels.csv has {labels.shape[0]} rows but features.csv has {num_nodes}"
        )

    masks = _read_masks(path / "masks.csv")
    if masks.shape[0] != num_nodes:
        raise DatasetError(f"masks.csv has {masks.shape[0]} rows but features.csv has {num_nodes}")
    if (masks.sum(axis=1) > 1).any():
        raise DatasetError("masks.csv assigns a node to more than one split")

    meta_path = path / "meta.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        num_classes = int(meta["num_classes"])
    else:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} >= declared num_classes {num_classes}")
    if labels.size and labels.min() < 0:
        raise DatasetError("negative label")

    edges = _read_edges(path / "edges.tsv", num_nodes)
    return Graph(
        num_nodes=num_nodes,
        edges=edges,
        features=features,
        labels=labels,
        train_mask=masks[:, 0],
        val_mask=masks[:, 1],
        test_mask=masks[:, 2],
        num_classes=num_classes,
    )


def save_dataset(g: Graph, path: str | Path) -> None:
    """Write ``g`` as a canonical dataset directory (round-trips exactly)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with (path / "edges.tsv").open("w") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with (path / "features.csv").open("w") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with (path / "labels.csv").open("w") as fh:
        for y in g.labels:
            fh.write(f"{y}\n")
    with (path / "masks.csv").open("w") as fh:
        fh.write("train,val,test\n")
        for tr, va, te in zip(g.train_mask, g.val_mask, g.test_mask):
            fh.write(f"{int(tr)},{int(va)},{int(te)}\n")
    (path / "meta.json").write_text(json.dumps({"num_classes": g.num_classes}) + "\n")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize(g: Graph) -> sp.csr_matrix:
    """Symmetrically normalized adjacency with self-loops, in CSR form.

    Returns ``D^{-1/2} (A + I) D^{-1/2}`` where ``D`` is the degree matrix
    of ``A + I``. The result is exactly symmetric, its nonzero pattern
    equals that of ``A + I``, and every stored entry lies in ``(0, 1]``.
    """
    n = g.num_nodes
    loops = np.arange(n, dtype=np.int64)
    if g.edges.size:
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], loops])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], loops])
    else:
        rows = cols = loops
    atil = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(atil.sum(axis=1)).ravel()
    dinv_sqrt = 1.0 / np.sqrt(deg)
    ahat = atil.multiply(dinv_sqrt[:, None]).multiply(dinv_sqrt[None, :])
    return sp.csr_matrix(ahat)


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


def sample_masks(
    num_nodes: int,
    rng: np.random.Generator,
    ratios: tuple[float, float, float] = MASK_RATIOS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random disjoint train/val/test masks with the given node fractions."""
    order = rng.permutation(num_nodes)
    n_train = int(round(ratios[0] * num_nodes))
    n_val = int(round(ratios[1] * num_nodes))
    train = np.zeros(num_nodes, dtype=bool)
    val = np.zeros(num_nodes, dtype=bool)
    test = np.zeros(num_nodes, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train : n_train + n_val]] = True
    n_test = int(round(ratios[2] * num_nodes))
    test[order[n_train + n_val : n_train + n_val + n_test]] = True
    return train, val, test


def generate_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    num_classes: int,
    label_shift: int = 0,
    seed: int = 0,
    mean_sep: float = 1.0,
    mask_ratios: tuple[float, float, float] = MASK_RATIOS,
) -> Graph:
    """Stochastic block model graph with class-conditional Gaussian features.

    Nodes are laid out block-contiguously (node ``v`` belongs to block
    ``v // nodes_per_block``). A node in block ``b`` has its feature drawn
    from a unit-variance Gaussian whose mean identifies community
    ``b % num_classes`` (class means are ``mean_sep`` apart along distinct
    feature axes), while its label is ``(b + label_shift) % num_classes``.
    ``label_shift=0`` aligns labels with the feature communities; a nonzero
    shift relabels the same underlying graph cyclically, so two graphs that
    differ only in shift share feature/topology statistics but disagree on
    the feature-to-label mapping.
    """
    if not p_in > p_out:
        raise ValueError("p_in must exceed p_out")
    n = blocks * nodes_per_block
    rng = derive_rng(seed, TAG_SBM)
    block_of = np.repeat(np.arange(blocks), nodes_per_block)

    prob = np.where(block_of[:, None] == block_of[None, :], p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper).astype(np.int64)

    community = block_of % num_classes
    labels = (community + label_shift) % num_classes
    means = np.zeros((num_classes, feature_dim))
    for c in range(num_classes):
        means[c, c % feature_dim] = mean_sep
    features = rng.standard_normal((n, feature_dim)) + means[community]

    mask_rng = derive_rng(seed, TAG_MASKS)
    train, val, test = sample_masks(n, mask_rng, mask_ratios)
    return Graph(
        num_nodes=n,
        edges=edges,
        features=features,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        num_classes=num_classes,
    )
