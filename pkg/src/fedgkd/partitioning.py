"""Federated splits: edge-cut graph partitioning and overlapping sampling.

The partitioner is a greedy multilevel scheme in the METIS family:
heavy-edge matching coarsens the graph, a balanced seeded BFS assigns the
coarsest level, and Kernighan–Lin style boundary refinement runs at every
uncoarsening step. A repair pass at the finest level enforces the balance
cap ``max part size <= ceil(1.1 * N / k)`` exactly. Precomputed
assignments (e.g. real METIS output, one part id per line) can be
substituted via :func:`load_partition_file` / :func:`split_from_assignment`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedgkd.graphs import Graph, generate_sbm, induced_subgraph
from fedgkd.seeding import TAG_OVERLAP, TAG_PARTITION, derive_rng


@dataclass(frozen=True)
class SplitProvenance:
    mode: str  # "non-overlapping" | "overlapping" | "per-client"
    num_clients: int
    seed: int


@dataclass(frozen=True)
class FederatedSplit:
    """Per-client graphs plus the provenance needed to reproduce them.

    ``client_nodes[i]`` maps client ``i``'s local node indices back to the
    source graph (or, for per-client synthetic federations, is just the
    local index range).
    """

    client_graphs: list[Graph]
    client_nodes: list[np.ndarray]
    provenance: SplitProvenance

    @property
    def num_clients(self) -> int:
        return len(self.client_graphs)


# ---------------------------------------------------------------------------
# internal weighted CSR used across coarsening levels
# ---------------------------------------------------------------------------


class _Level:
    """Symmetric weighted graph at one coarsening level."""

    __slots__ = ("n", "indptr", "indices", "eweights", "nweights")

    def __init__(self, n: int, indptr: np.ndarray, indices: np.ndarray,
                 eweights: np.ndarray, nweights: np.ndarray) -> None:
        self.n = n
        self.indptr = indptr
        self.indices = indices
        self.eweights = eweights
        self.nweights = nweights

    def neighbors(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return self.indices[lo:hi], self.eweights[lo:hi]


def _level_from_pairs(n: int, pairs: dict[tuple[int, int], int], nweights: np.ndarray) -> _Level:
    m = len(pairs)
    rows = np.empty(2 * m, dtype=np.int64)
    cols = np.empty(2 * m, dtype=np.int64)
    wts = np.empty(2 * m, dtype=np.int64)
    for i, ((u, v), w) in enumerate(pairs.items()):
        rows[2 * i], cols[2 * i], wts[2 * i] = u, v, w
        rows[2 * i + 1], cols[2 * i + 1], wts[2 * i + 1] = v, u, w
    order = np.lexsort((cols, rows))
    rows, cols, wts = rows[order], cols[order], wts[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return _Level(n, indptr, cols, wts, nweights)


def _level_from_edges(num_nodes: int, edges: np.ndarray) -> _Level:
    pairs = {(int(u), int(v)): 1 for u, v in edges}
    return _level_from_pairs(num_nodes, pairs, np.ones(num_nodes, dtype=np.int64))


def _heavy_edge_matching(level: _Level, rng: np.random.Generator,
                         max_weight: int) -> tuple[np.ndarray, int]:
    """Greedy heavy-edge matching; returns coarse ids and coarse node count."""
    match = np.full(level.n, -1, dtype=np.int64)
    for v in rng.permutation(level.n):
        if match[v] >= 0:
            continue
        nbrs, wts = level.neighbors(v)
        best, best_w = -1, 0
        for u, w in zip(nbrs, wts):
            if match[u] >= 0 or u == v:
                continue
            if level.nweights[v] + level.nweights[u] > max_weight:
                continue
            if w > best_w or (w == best_w and best >= 0 and u < best):
                best, best_w = int(u), int(w)
        if best >= 0:
            match[v] = best
            match[best] = v
        else:
            match[v] = v
    cmap = np.full(level.n, -1, dtype=np.int64)
    nxt = 0
    for v in range(level.n):
        if cmap[v] < 0:
            cmap[v] = nxt
            cmap[match[v]] = nxt
            nxt += 1
    return cmap, nxt


def _contract(level: _Level, cmap: np.ndarray, coarse_n: int) -> _Level:
    nweights = np.zeros(coarse_n, dtype=np.int64)
    np.add.at(nweights, cmap, level.nweights)
    pairs: dict[tuple[int, int], int] = {}
    for v in range(level.n):
        cv = cmap[v]
        nbrs, wts = level.neighbors(v)
        for u, w in zip(nbrs, wts):
            if u <= v:
                continue  # visit each undirected edge once
            cu = cmap[u]
            if cu == cv:
                continue
            key = (cv, cu) if cv < cu else (cu, cv)
            pairs[key] = pairs.get(key, 0) + int(w)
    return _level_from_pairs(coarse_n, pairs, nweights)


def _farthest_first_seeds(level: _Level, k: int, rng: np.random.Generator) -> list[int]:
    seeds = [int(rng.integers(level.n))]
    dist = np.full(level.n, np.inf)
    for _ in range(k - 1):
        # BFS from the newest seed, keep min hop distance to any seed
        frontier = [seeds[-1]]
        dist[seeds[-1]] = 0
        d = 0
        while frontier:
            d += 1
            nxt = []
            for v in frontier:
                for u in level.neighbors(v)[0]:
                    if dist[u] > d:
                        dist[u] = d
                        nxt.append(int(u))
            frontier = nxt
        cand = int(np.argmax(np.where(np.isinf(dist), np.float64(level.n + 1), dist)))
        if np.isinf(dist).any():
            cand = int(np.flatnonzero(np.isinf(dist))[0])
        seeds.append(cand)
        dist[cand] = 0
    return seeds


def _grow_parts(level: _Level, seeds: list[int], k: int) -> np.ndarray:
    """Balanced multi-source BFS growth; the lightest part claims next,
    so parts stay weight-balanced without an explicit cap (the repair pass
    enforces the cap exactly at the finest level)."""
    assign = np.full(level.n, -1, dtype=np.int64)
    weights = np.zeros(k, dtype=np.int64)
    frontiers: list[list[int]] = [[] for _ in range(k)]
    heads = [0] * k
    for p, s in enumerate(seeds):
        assign[s] = p
        weights[p] += level.nweights[s]
        frontiers[p].extend(int(u) for u in level.neighbors(s)[0])
    remaining = level.n - k
    unassigned_cursor = 0
    while remaining > 0:
        p = int(np.argmin(weights))
        claimed = False
        q = frontiers[p]
        while heads[p] < len(q):
            v = q[heads[p]]
            heads[p] += 1
            if assign[v] < 0:
                assign[v] = p
                weights[p] += level.nweights[v]
                q.extend(int(u) for u in level.neighbors(v)[0] if assign[u] < 0)
                claimed = True
                break
        if not claimed:
            # frontier exhausted (disconnected component or cap pressure):
            # teleport to the first unassigned node
            while unassigned_cursor < level.n and assign[unassigned_cursor] >= 0:
                unassigned_cursor += 1
            if unassigned_cursor >= level.n:
                break
            v = unassigned_cursor
            assign[v] = p
            weights[p] += level.nweights[v]
            q.extend(int(u) for u in level.neighbors(v)[0] if assign[u] < 0)
        remaining -= 1
    return assign


def _part_connectivity(level: _Level, assign: np.ndarray, v: int, k: int) -> np.ndarray:
    conn = np.zeros(k, dtype=np.int64)
    nbrs, wts = level.neighbors(v)
    for u, w in zip(nbrs, wts):
        conn[assign[u]] += w
    return conn


def _refine(level: _Level, assign: np.ndarray, k: int, cap: int, passes: int = 8) -> None:
    """Greedy gain-based boundary moves, in place."""
    weights = np.zeros(k, dtype=np.int64)
    np.add.at(weights, assign, level.nweights)
    counts = np.bincount(assign, minlength=k)
    for _ in range(passes):
        moved = 0
        for v in range(level.n):
            p = int(assign[v])
            if counts[p] <= 1:
                continue
            nbrs, _ = level.neighbors(v)
            if len(nbrs) == 0 or all(assign[u] == p for u in nbrs):
                continue
            conn = _part_connectivity(level, assign, v, k)
            internal = conn[p]
            w_v = int(level.nweights[v])
            best_q, best_gain = -1, 0
            for q in range(k):
                if q == p or conn[q] == 0:
                    continue
                if weights[q] + w_v > cap:
                    continue
                gain = int(conn[q] - internal)
                if gain > best_gain or (gain == best_gain and best_q >= 0 and q < best_q):
                    best_q, best_gain = q, gain
            if best_q >= 0 and best_gain > 0:
                assign[v] = best_q
                weights[p] -= w_v
                weights[best_q] += w_v
                counts[p] -= 1
                counts[best_q] += 1
                moved += 1
        if moved == 0:
            break


def _repair_balance(level: _Level, assign: np.ndarray, k: int, cap: int) -> None:
    """Move nodes out of over-cap parts (finest level only, unit weights)."""
    weights = np.zeros(k, dtype=np.int64)
    np.add.at(weights, assign, level.nweights)
    while weights.max() > cap:
        p = int(np.argmax(weights))
        members = np.flatnonzero(assign == p)
        best_v, best_q, best_gain = -1, -1, -(1 << 60)
        for v in members:
            conn = _part_connectivity(level, assign, int(v), k)
            internal = conn[p]
            for q in range(k):
                if q == p or weights[q] + level.nweights[v] > cap:
                    continue
                gain = int(conn[q] - internal)
                if gain > best_gain:
                    best_v, best_q, best_gain = int(v), q, gain
        if best_v < 0:
            raise RuntimeError("balance repair failed; cap infeasible")
        assign[best_v] = best_q
        weights[p] -= level.nweights[best_v]
        weights[best_q] += level.nweights[best_v]


def multilevel_assignment(g: Graph, k: int, seed: int, imbalance: float = 1.1) -> np.ndarray:
    """Assign every node to one of ``k`` parts, minimizing edge cut greedily."""
    if k < 2:
        raise ValueError("partitioning requires at least 2 parts")
    if k > g.num_nodes:
        raise ValueError(f"cannot split {g.num_nodes} nodes into {k} parts")
    rng = derive_rng(seed, TAG_PARTITION)
    cap = math.ceil(imbalance * g.num_nodes / k)

    levels = [_level_from_edges(g.num_nodes, g.edges)]
    cmaps: list[np.ndarray] = []
    coarsen_until = max(40, 15 * k)
    max_node_weight = max(1, cap // 3)
    while levels[-1].n > coarsen_until:
        cmap, coarse_n = _heavy_edge_matching(levels[-1], rng, max_node_weight)
        if coarse_n > 0.95 * levels[-1].n:
            break
        cmaps.append(cmap)
        levels.append(_contract(levels[-1], cmap, coarse_n))

    coarsest = levels[-1]
    seeds = _farthest_first_seeds(coarsest, k, rng)
    assign = _grow_parts(coarsest, seeds, k)
    _refine(coarsest, assign, k, cap)
    for level, cmap in zip(reversed(levels[:-1]), reversed(cmaps)):
        assign = assign[cmap]
        _refine(level, assign, k, cap)
    _repair_balance(levels[0], assign, k, cap)
    _refine(levels[0], assign, k, cap)
    return assign


def edge_cut(g: Graph, assignment: np.ndarray) -> int:
    """Number of edges whose endpoints land in different parts."""
    if g.edges.size == 0:
        return 0
    return int((assignment[g.edges[:, 0]] != assignment[g.edges[:, 1]]).sum())


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_from_assignment(
    g: Graph, assignment: np.ndarray, seed: int = 0, mode: str = "non-overlapping"
) -> FederatedSplit:
    """Build per-client induced subgraphs from a node-to-part assignment."""
    assignment = np.asarray(assignment, dtype=np.int64).ravel()
    if assignment.shape[0] != g.num_nodes:
        raise ValueError("assignment length must equal the node count")
    k = int(assignment.max()) + 1
    if assignment.min() < 0:
        raise ValueError("negative part id")
    graphs, nodes = [], []
    for p in range(k):
        sel = np.flatnonzero(assignment == p)
        if sel.size == 0:
            raise ValueError(f"part {p} is empty")
        graphs.append(induced_subgraph(g, sel))
        nodes.append(sel)
    return FederatedSplit(graphs, nodes, SplitProvenance(mode, k, seed))


def partition(g: Graph, n: int, seed: int) -> FederatedSplit:
    """Split ``g`` into ``n`` balanced, edge-cut-minimizing client subgraphs.

    Inter-client edges are dropped; features, labels and masks are restricted
    to each client's nodes. Deterministic in ``(g, n, seed)``.
    """
    assignment = multilevel_assignment(g, n, seed)
    return split_from_assignment(g, assignment, seed=seed, mode="non-overlapping")


def overlapping_split(g: Graph, n: int, seed: int) -> FederatedSplit:
    """Split into ``n`` clients with overlapping vertices.

    The graph is first partitioned into ``n // 5`` subgraphs; from each,
    five independent 50% node samples (with induced edges) become five
    clients. ``n`` must be a multiple of 5.
    """
    if n % 5 != 0 or n < 5:
        raise ValueError("overlapping split requires n to be a multiple of 5")
    k = n // 5
    if k == 1:
        bases = [(g, np.arange(g.num_nodes, dtype=np.int64))]
    else:
        base = partition(g, k, seed)
        bases = list(zip(base.client_graphs, base.client_nodes))
    graphs, nodes = [], []
    for p, (bg, bnodes) in enumerate(bases):
        for rep in range(5):
            rng = derive_rng(seed, TAG_OVERLAP, p, rep)
            size = bg.num_nodes // 2
            sel = np.sort(rng.choice(bg.num_nodes, size=size, replace=False))
            graphs.append(induced_subgraph(bg, sel))
            nodes.append(bnodes[sel])
    return FederatedSplit(graphs, nodes, SplitProvenance("overlapping", n, seed))


def load_partition_file(path: str | Path) -> np.ndarray:
    """Read a precomputed assignment: one integer part id per node per line."""
    parts = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                parts.append(int(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected an integer part id") from exc
    return np.asarray(parts, dtype=np.int64)


def sbm_group_split(
    group_sizes: Sequence[int],
    label_shifts: Sequence[int],
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    num_classes: int,
    mean_sep: float = 1.0,
    seed: int = 0,
) -> FederatedSplit:
    """Per-client synthetic federation: independent SBM draws per client.

    Clients in group ``gi`` share ``label_shifts[gi]``, so groups agree on
    topology/feature statistics but disagree on the feature-to-label
    mapping, giving a controlled heterogeneity fixture.
    """
    if len(group_sizes) != len(label_shifts):
        raise ValueError("group_sizes and label_shifts must align")
    graphs, nodes = [], []
    client = 0
    for size, shift in zip(group_sizes, label_shifts):
        for _ in range(size):
            gph = generate_sbm(
                blocks=blocks,
                nodes_per_block=nodes_per_block,
                p_in=p_in,
                p_out=p_out,
                feature_dim=feature_dim,
                num_classes=num_classes,
                label_shift=shift,
                seed=[seed, client],
                mean_sep=mean_sep,
            )
            graphs.append(gph)
            nodes.append(np.arange(gph.num_nodes, dtype=np.int64))
            client += 1
    return FederatedSplit(graphs, nodes, SplitProvenance("per-client", client, seed))
