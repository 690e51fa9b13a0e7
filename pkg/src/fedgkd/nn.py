"""Two-layer GCN with linear readout, hand-derived gradients, and Adam.

The forward pass accepts either a pre-normalized sparse adjacency (real
graphs) or a raw dense soft adjacency (distilled graphs); the dense path
applies the identical symmetric normalization ``D^{-1/2}(P + I)D^{-1/2}``
internally, and the backward pass propagates through that normalization so
callers can obtain exact gradients with respect to the dense adjacency and
the input features.

No general autodiff: the architecture is fixed
(``logits = relu(A·relu(A·X·W1)·W2)·W_out + b_out``) and all gradients are
derived by hand.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from fedgkd.seeding import TAG_MODEL_INIT, derive_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 1e-6

_PARAM_FIELDS = ("w1", "w2", "w_out", "b_out")


@dataclass
class ModelParams:
    """Weights of the 2-layer GCN plus linear readout; the unit of federation."""

    w1: np.ndarray  # [D, d]
    w2: np.ndarray  # [d, d]
    w_out: np.ndarray  # [d, C]
    b_out: np.ndarray  # [C]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.w2, self.w_out, self.b_out)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, like: "ModelParams") -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != like.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {like.size}")
        out, offset = [], 0
        for a in like.arrays():
            out.append(flat[offset : offset + a.size].reshape(a.shape).copy())
            offset += a.size
        return cls(*out)

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(getattr(self, name).shape) for name in _PARAM_FIELDS}


def init_params(feature_dim: int, hidden_dim: int, num_classes: int, seed) -> ModelParams:
    """Glorot-uniform weights, zero output bias, fully seeded."""
    rng = derive_rng(seed, TAG_MODEL_INIT)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return ModelParams(
        w1=glorot(feature_dim, hidden_dim),
        w2=glorot(hidden_dim, hidden_dim),
        w_out=glorot(hidden_dim, num_classes),
        b_out=np.zeros(num_classes),
    )


# ---------------------------------------------------------------------------
# activations / losses
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def loss_ce(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean negative log-softmax over masked rows."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss_ce requires a non-empty mask")
    rows = log_softmax(logits[mask])
    picked = rows[np.arange(rows.shape[0]), np.asarray(targets)[mask]]
    return float(-picked.mean())


def loss_ce_grad(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d loss_ce / d logits (zero outside the mask)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss_ce requires a non-empty mask")
    k = int(mask.sum())
    grad = np.zeros_like(logits)
    probs = softmax(logits[mask])
    probs[np.arange(k), np.asarray(targets)[mask]] -= 1.0
    grad[mask] = probs / k
    return grad


def _check_target_probs(target_probs: np.ndarray) -> None:
    if (target_probs < 0).any():
        raise ValueError("negative target probability")
    if np.abs(target_probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("target probability rows must sum to 1")


def loss_ce_soft(logits: np.ndarray, target_probs: np.ndarray) -> float:
    """Mean cross-entropy against soft target rows."""
    _check_target_probs(target_probs)
    return float(-(target_probs * log_softmax(logits)).sum(axis=1).mean())


def loss_ce_soft_grads(
    logits: np.ndarray, target_probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of loss_ce_soft w.r.t. both logits and target probabilities."""
    _check_target_probs(target_probs)
    n = logits.shape[0]
    d_logits = (softmax(logits) - target_probs) / n
    d_targets = -log_softmax(logits) / n
    return d_logits, d_targets


def softmax_vjp(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the underlying logits."""
    inner = (probs * d_probs).sum(axis=1, keepdims=True)
    return probs * (d_probs - inner)


def prox_penalty(params: ModelParams, anchor: ModelParams, weight: float) -> float:
    """``weight * ||params - anchor||_2^2`` over all coordinates."""
    return float(weight * sum(((a - b) ** 2).sum() for a, b in zip(params.arrays(), anchor.arrays())))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def normalize_dense_adjacency(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric normalization of a dense soft adjacency: ``D^{-1/2}(P+I)D^{-1/2}``.

    Returns the normalized matrix and the row sums of ``P + I`` (needed to
    backpropagate through the normalization).
    """
    p = np.asarray(p, dtype=np.float64)
    ptil = p + np.eye(p.shape[0])
    row_sums = ptil.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(row_sums)
    return ptil * inv_sqrt[:, None] * inv_sqrt[None, :], row_sums


@dataclass
class ForwardTrace:
    """Intermediates retained for the hand-derived backward pass."""

    params: ModelParams
    x: np.ndarray
    m1: np.ndarray  # X @ W1
    s1: np.ndarray  # A @ m1 (pre-activation, layer 1)
    a1: np.ndarray  # relu(s1)
    m2: np.ndarray  # a1 @ W2
    s2: np.ndarray  # A @ m2 (pre-activation, layer 2)
    h: np.ndarray  # relu(s2): node embeddings
    logits: np.ndarray
    adj_sparse: sp.csr_matrix | None
    adj_dense_norm: np.ndarray | None
    adj_row_sums: np.ndarray | None

    @property
    def is_dense(self) -> bool:
        return self.adj_dense_norm is not None


def forward(params: ModelParams, adj, x: np.ndarray) -> ForwardTrace:
    """Run the GCN: ``logits = relu(A·relu(A·X·W1)·W2)·W_out + b_out``.

    ``adj`` is either a normalized sparse adjacency (CSR) or a raw dense
    soft adjacency, which is normalized here with the same formula.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ValueError(
            f"input features have shape {x.shape}, expected (*, {params.w1.shape[0]})"
        )
    if sp.issparse(adj):
        a_sparse: sp.csr_matrix | None = sp.csr_matrix(adj)
        a_dense, row_sums = None, None
        propagate = a_sparse.dot
    else:
        a_sparse = None
        a_dense, row_sums = normalize_dense_adjacency(adj)
        propagate = a_dense.dot
    m1 = x @ params.w1
    s1 = propagate(m1)
    a1 = np.maximum(s1, 0.0)
    m2 = a1 @ params.w2
    s2 = propagate(m2)
    h = np.maximum(s2, 0.0)
    logits = h @ params.w_out + params.b_out
    return ForwardTrace(
        params=params,
        x=x,
        m1=m1,
        s1=s1,
        a1=a1,
        m2=m2,
        s2=s2,
        h=h,
        logits=logits,
        adj_sparse=a_sparse,
        adj_dense_norm=a_dense,
        adj_row_sums=row_sums,
    )


@dataclass
class BackwardResult:
    grads: ModelParams  # gradients shaped like the parameters
    d_input: np.ndarray | None  # d loss / d X
    d_adjacency: np.ndarray | None  # d loss / d P (dense path only)


def backward(
    trace: ForwardTrace,
    d_logits: np.ndarray,
    prox: tuple[float, ModelParams] | None = None,
    want_input_grads: bool = False,
) -> BackwardResult:
    """Exact reverse-mode gradients for the fixed architecture.

    ``prox=(weight, anchor)`` adds the proximal contribution
    ``2·weight·(param − anchor)`` to every parameter gradient. With
    ``want_input_grads`` the result also carries d loss/d X and, on the
    dense path, d loss/d P through the internal normalization.
    """
    params = trace.params
    propagate = trace.adj_sparse.dot if trace.adj_sparse is not None else trace.adj_dense_norm.dot

    d_w_out = trace.h.T @ d_logits
    d_b_out = d_logits.sum(axis=0)
    d_h = d_logits @ params.w_out.T
    d_s2 = d_h * (trace.s2 > 0)
    d_m2 = propagate(d_s2)  # A is symmetric, so A^T·g = A·g
    d_w2 = trace.a1.T @ d_m2
    d_a1 = d_m2 @ params.w2.T
    d_s1 = d_a1 * (trace.s1 > 0)
    d_m1 = propagate(d_s1)
    d_w1 = trace.x.T @ d_m1

    grads = ModelParams(w1=d_w1, w2=d_w2, w_out=d_w_out, b_out=d_b_out)
    if prox is not None:
        weight, anchor = prox
        if weight != 0.0:
            for g, p, a in zip(grads.arrays(), params.arrays(), anchor.arrays()):
                g += 2.0 * weight * (p - a)

    d_input = d_adj = None
    if want_input_grads:
        d_input = d_m1 @ params.w1.T
        if trace.is_dense:
            # d loss / d normalized adjacency
            g_norm = d_s2 @ trace.m2.T + d_s1 @ trace.m1.T
            # pull back through D^{-1/2}(P+I)D^{-1/2}; the identity shift
            # leaves d/dP equal to d/d(P+I)
            # perturbing (P+I)[k,l] shifts only row sum r[k], so both the
            # d s_k and d s_l corrections attach to row k
            r = trace.adj_row_sums
            inv_sqrt = 1.0 / np.sqrt(r)
            weighted = g_norm * trace.adj_dense_norm
            correction = (weighted.sum(axis=1) + weighted.sum(axis=0)) / (2.0 * r)
            d_adj = g_norm * inv_sqrt[:, None] * inv_sqrt[None, :] - correction[:, None]
    return BackwardResult(grads=grads, d_input=d_input, d_adjacency=d_adj)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_array_step(
    value: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """One Adam update on a raw array; moment buffers are updated in place."""
    m *= ADAM_BETA1
    m += (1.0 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    new = value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if weight_decay:
        new -= lr * weight_decay * value  # decoupled decay
    return new


@dataclass
class AdamState:
    """Moment accumulators for a ModelParams-shaped optimizee (single owner)."""

    m: ModelParams
    v: ModelParams
    step: int
    lr: float
    weight_decay: float


def init_adam(params: ModelParams, lr: float, weight_decay: float = DEFAULT_WEIGHT_DECAY) -> AdamState:
    zeros = lambda: ModelParams(*(np.zeros_like(a) for a in params.arrays()))
    return AdamState(m=zeros(), v=zeros(), step=0, lr=lr, weight_decay=weight_decay)


def adam_step(state: AdamState, params: ModelParams, grads: ModelParams) -> ModelParams:
    """Advance the optimizer one step and return the updated parameters."""
    state.step += 1
    new = [
        adam_array_step(p, g, m, v, state.step, state.lr, state.weight_decay)
        for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays())
    ]
    return ModelParams(*new)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, path: str | Path) -> None:
    """Checkpoint: one JSON header line, then the flat little-endian float64 vector."""
    payload = params.flatten().astype("<f8").tobytes()
    header = {
        "shapes": {k: list(v) for k, v in params.shapes().items()},
        "dtype": "<f8",
        "count": params.size,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"checkpoint {path}: content hash mismatch")
    flat = np.frombuffer(payload, dtype=header["dtype"])
    if flat.size != header["count"]:
        raise ValueError(f"checkpoint {path}: expected {header['count']} values, got {flat.size}")
    arrays, offset = [], 0
    for name in _PARAM_FIELDS:
        shape = tuple(header["shapes"][name])
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[offset : offset + size].reshape(shape).astype(np.float64))
        offset += size
    return ModelParams(*arrays)
