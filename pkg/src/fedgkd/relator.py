"""Server-side task relator: relation matrix, kernel, aggregation weights.

Pairwise task-relatedness is the feature-wise average Pearson correlation
between two clients' task-feature matrices. The relation matrix is lifted
to a global-connectivity measure via the matrix exponential (summing walk
contributions of every length), then passed through an element-wise
exponential and row-normalized into per-client aggregation distributions.
Personalized models are convex combinations of client weights under those
distributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedgkd.distill import TaskFeature
from fedgkd.nn import ModelParams

# column whose centered norm falls below this is treated as zero-variance
_ZERO_VARIANCE_TOL = 1e-12


@dataclass(frozen=True)
class RelationMatrix:
    """Symmetric client-relatedness matrix with unit diagonal, entries in [-1, 1]."""

    values: np.ndarray  # [n, n]
    round_idx: int


@dataclass(frozen=True)
class KernelState:
    """Global connectivity, kernel values, and row-stochastic mixing weights."""

    connectivity: np.ndarray  # matrix exponential of tau * R; symmetric PSD
    kernel: np.ndarray  # elementwise exp(tau_s * connectivity)
    mixing: np.ndarray  # row-stochastic; row i mixes client i's aggregate
    tau: float
    tau_s: float


def compute_relations(features: Sequence[TaskFeature]) -> RelationMatrix:
    """Feature-wise average Pearson correlation between client task features.

    A column with zero variance in either operand contributes 0 to the
    average (the total column count still divides). The diagonal is forced
    to exactly 1 and the result is symmetrized against rounding.
    """
    if not features:
        raise ValueError("no task features")
    shape = features[0].matrix.shape
    round_idx = features[0].round_idx
    if shape[0] < 2:
        raise ValueError("task features need at least 2 rows for correlations")
    for f in features:
        if f.matrix.shape != shape:
            raise ValueError(f"task feature shape mismatch: {f.matrix.shape} vs {shape}")
        if f.round_idx != round_idx:
            raise ValueError("task features from different rounds")

    rows, cols = shape
    normalized = np.zeros((len(features), rows, cols))
    for i, f in enumerate(features):
        centered = f.matrix - f.matrix.mean(axis=0, keepdims=True)
        norms = np.linalg.norm(centered, axis=0)
        keep = norms > _ZERO_VARIANCE_TOL
        normalized[i][:, keep] = centered[:, keep] / norms[keep]
    rel = np.einsum("irk,jrk->ij", normalized, normalized) / cols
    rel = np.clip((rel + rel.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(rel, 1.0)
    return RelationMatrix(values=rel, round_idx=round_idx)


def matrix_exp(sym: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Matrix exponential of ``tau * sym`` via symmetric eigendecomposition.

    Being the exponential of a symmetric matrix, the result is positive
    semidefinite for any symmetric input.
    """
    sym = np.asarray(sym, dtype=np.float64)
    if sym.ndim != 2 or sym.shape[0] != sym.shape[1]:
        raise ValueError("expected a square matrix")
    if np.abs(sym - sym.T).max() > 1e-8:
        raise ValueError("matrix is not symmetric")
    eigvals, eigvecs = np.linalg.eigh((sym + sym.T) / 2.0)
    out = (eigvecs * np.exp(tau * eigvals)) @ eigvecs.T
    return (out + out.T) / 2.0


def kernelize(connectivity: np.ndarray, tau_s: float, tau: float = np.nan) -> KernelState:
    """Element-wise exponential kernel and row-normalized mixing weights.

    Mixing rows are computed with row-max subtraction, which leaves the
    normalized result unchanged but cannot overflow; the raw kernel matrix
    is reported as-is.
    """
    connectivity = np.asarray(connectivity, dtype=np.float64)
    if not np.isfinite(connectivity).all():
        raise ValueError("connectivity contains non-finite entries")
    scaled = tau_s * connectivity
    with np.errstate(over="ignore"):  # raw kernel may saturate; mixing never does
        kernel = np.exp(scaled)
    shifted = np.exp(scaled - scaled.max(axis=1, keepdims=True))
    mixing = shifted / shifted.sum(axis=1, keepdims=True)
    return KernelState(
        connectivity=connectivity, kernel=kernel, mixing=mixing, tau=tau, tau_s=tau_s
    )


def relate(relations: RelationMatrix, tau: float, tau_s: float) -> KernelState:
    """Full relator: relations -> global connectivity -> mixing weights."""
    return kernelize(matrix_exp(relations.values, tau), tau_s, tau=tau)


def uniform_mixing(n: int) -> np.ndarray:
    """The mixing matrix whose aggregation rule is a plain uniform average."""
    return np.full((n, n), 1.0 / n)


def aggregate(weights: Sequence[ModelParams], mixing: np.ndarray) -> list[ModelParams]:
    """Per-client convex combinations of flattened parameter vectors."""
    n = len(weights)
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (n, n):
        raise ValueError(f"mixing matrix shape {mixing.shape} does not match {n} clients")
    ref = weights[0]
    if any(w.size != ref.size for w in weights):
        raise ValueError("client parameter shapes differ")
    flats = np.stack([w.flatten() for w in weights])
    mixed = mixing @ flats
    return [ModelParams.from_flat(row, like=ref) for row in mixed]
