"""Client-side dynamic graph distillation and task-feature extraction.

Each round every client compresses its task into a tiny synthetic graph of
``m`` nodes per class: starting from a server-broadcast Gaussian init, a few
Adam steps update the synthetic node features and soft labels to minimize
the frozen local model's loss on the synthetic graph. Edges are sampled
from an inner-product generative model relaxed with a Gumbel-difference
(logistic) perturbation inside a sigmoid; the forward pass uses the hard
threshold sample and gradients flow through the soft probabilities
(straight-through).

The emitted task feature is the row-aligned matrix ``[X_s || H_s]`` (node
features concatenated with their embeddings under the local model); rows
follow the canonical class-block order of the shared init, so features are
comparable across clients without any alignment step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fedgkd.nn import (
    ModelParams,
    adam_array_step,
    backward,
    forward,
    loss_ce_soft,
    loss_ce_soft_grads,
    softmax,
    softmax_vjp,
)
from fedgkd.seeding import TAG_DISTILL_FINAL, TAG_DISTILL_INIT, TAG_DISTILL_STEPS, derive_rng

FEATURE_MAPS = ("x_h", "x", "h", "y")


class DistillationError(RuntimeError):
    """Distillation produced a non-finite loss."""


@dataclass(frozen=True)
class DistillInit:
    """Server-broadcast common starting point: Gaussian features, block labels."""

    x0: np.ndarray  # [(m*C), D], iid standard normal
    y0: np.ndarray  # [(m*C)], exactly m nodes per class, class-block order
    seed: int


@dataclass
class DistilledGraph:
    """Learnable synthetic graph: features, soft-label logits, edge hyperparameters."""

    xs: np.ndarray  # [(m*C), D]
    y_logits: np.ndarray  # [(m*C), C]
    gamma: float  # edge sparsity penalty, > 0
    tau_g: float  # Gumbel temperature, > 0

    def label_probs(self) -> np.ndarray:
        return softmax(self.y_logits)


@dataclass(frozen=True)
class TaskFeature:
    """Per-client summary matrix shipped to the server each round."""

    matrix: np.ndarray  # [(m*C), width]; width = D + d for the default map
    client_id: int
    round_idx: int


@dataclass
class DistillResult:
    graph: DistilledGraph
    task_feature: TaskFeature
    losses: list[float]  # per optimization step
    mean_soft_density: float  # mean soft edge probability over steps


def server_init_distill(m: int, num_classes: int, feature_dim: int, seed) -> DistillInit:
    """Seeded Gaussian features and block labels ``[0]*m + [1]*m + ...``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = derive_rng(seed, TAG_DISTILL_INIT)
    x0 = rng.standard_normal((m * num_classes, feature_dim))
    y0 = np.repeat(np.arange(num_classes, dtype=np.int64), m)
    seed_int = int(seed) if isinstance(seed, (int, np.integer)) else int(np.asarray(seed).ravel()[0])
    return DistillInit(x0=x0, y0=y0, seed=seed_int)


def sample_soft_adjacency(
    xs: np.ndarray, gamma: float, tau_g: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one stochastic adjacency from the inner-product edge model.

    For each unordered pair ``(u, v)`` the soft probability is
    ``sigmoid((<x_u, x_v> - gamma + w - w') / tau_g)`` with ``w, w'`` iid
    standard Gumbel. Returns ``(hard, soft)``: the hard matrix thresholds
    the soft one at 0.5 (the straight-through forward value), both are
    symmetric with a zero diagonal.
    """
    if tau_g <= 0:
        raise ValueError("tau_g must be positive")
    n = xs.shape[0]
    iu, iv = np.triu_indices(n, k=1)
    logits = (xs @ xs.T)[iu, iv] - gamma
    noise = rng.gumbel(size=len(iu)) - rng.gumbel(size=len(iu))
    soft_pairs = expit((logits + noise) / tau_g)
    hard_pairs = (soft_pairs > 0.5).astype(np.float64)
    soft = np.zeros((n, n))
    hard = np.zeros((n, n))
    soft[iu, iv] = soft_pairs
    soft[iv, iu] = soft_pairs
    hard[iu, iv] = hard_pairs
    hard[iv, iu] = hard_pairs
    return hard, soft


def assemble_task_feature(kind: str, xs: np.ndarray, h: np.ndarray, y_probs: np.ndarray) -> np.ndarray:
    """Feature-map variants; the default ships features and embeddings."""
    if kind == "x_h":
        return np.concatenate([xs, h], axis=1)
    if kind == "x":
        return xs.copy()
    if kind == "h":
        return h.copy()
    if kind == "y":
        return y_probs.copy()
    raise ValueError(f"unknown feature map {kind!r}; expected one of {FEATURE_MAPS}")


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


def distill_round(
    init: DistillInit,
    params: ModelParams,
    distill_steps: int,
    lr: float,
    gamma: float,
    tau_g: float,
    seed,
    feature_map: str = "x_h",
    client_id: int = 0,
    round_idx: int = 0,
) -> DistillResult:
    """Distill a synthetic graph against frozen model weights.

    Runs ``distill_steps`` Adam updates of the synthetic features and label
    logits, resampling the stochastic adjacency each step. Gradients reach
    the features both directly (GCN input) and through the straight-through
    edge probabilities. The final embeddings use one hard adjacency drawn
    from a dedicated deterministic stream, so repeated calls with equal
    inputs emit identical task features. ``params`` is never mutated.
    """
    num_classes = int(init.y0.max()) + 1
    xs = init.x0.copy()
    y_logits = _one_hot(init.y0, num_classes)
    step_rng = derive_rng(seed, TAG_DISTILL_STEPS)

    m_x, v_x = np.zeros_like(xs), np.zeros_like(xs)
    m_y, v_y = np.zeros_like(y_logits), np.zeros_like(y_logits)
    losses: list[float] = []
    densities: list[float] = []
    n = xs.shape[0]
    iu, iv = np.triu_indices(n, k=1)

    for step in range(1, distill_steps + 1):
        hard, soft = sample_soft_adjacency(xs, gamma, tau_g, step_rng)
        densities.append(float(soft[iu, iv].mean()) if len(iu) else 0.0)
        trace = forward(params, hard, xs)
        y_probs = softmax(y_logits)
        loss = loss_ce_soft(trace.logits, y_probs)
        if not np.isfinite(loss):
            raise DistillationError(
                f"non-finite distillation loss at step {step} "
                f"(client {client_id}, round {round_idx})"
            )
        losses.append(loss)

        d_logits, d_probs = loss_ce_soft_grads(trace.logits, y_probs)
        back = backward(trace, d_logits, want_input_grads=True)
        d_xs = back.d_input.copy()
        # straight-through: route the adjacency gradient through the soft
        # probabilities of the pairwise inner-product logits
        pair_grad = back.d_adjacency[iu, iv] + back.d_adjacency[iv, iu]
        d_edge_logit = pair_grad * soft[iu, iv] * (1.0 - soft[iu, iv]) / tau_g
        w_sym = np.zeros((n, n))
        w_sym[iu, iv] = d_edge_logit
        w_sym[iv, iu] = d_edge_logit
        d_xs += w_sym @ xs
        d_y = softmax_vjp(y_probs, d_probs)

        xs = adam_array_step(xs, d_xs, m_x, v_x, step, lr)
        y_logits = adam_array_step(y_logits, d_y, m_y, v_y, step, lr)

    final_rng = derive_rng(seed, TAG_DISTILL_FINAL)
    hard, soft = sample_soft_adjacency(xs, gamma, tau_g, final_rng)
    if not densities:
        densities.append(float(soft[iu, iv].mean()) if len(iu) else 0.0)
    trace = forward(params, hard, xs)
    graph = DistilledGraph(xs=xs, y_logits=y_logits, gamma=gamma, tau_g=tau_g)
    matrix = assemble_task_feature(feature_map, xs, trace.h, softmax(y_logits))
    if not np.isfinite(matrix).all():
        raise DistillationError(
            f"non-finite task feature (client {client_id}, round {round_idx})"
        )
    feature = TaskFeature(matrix=matrix, client_id=client_id, round_idx=round_idx)
    return DistillResult(
        graph=graph,
        task_feature=feature,
        losses=losses,
        mean_soft_density=float(np.mean(densities)),
    )


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def serialize_task_feature(feature: TaskFeature) -> bytes:
    """Wire payload: JSON header line + row-major little-endian float64."""
    rows, cols = feature.matrix.shape
    header = {
        "client_id": feature.client_id,
        "round": feature.round_idx,
        "rows": rows,
        "cols": cols,
    }
    return (
        json.dumps(header, sort_keys=True).encode("utf-8")
        + b"\n"
        + np.ascontiguousarray(feature.matrix, dtype="<f8").tobytes()
    )


def deserialize_task_feature(data: bytes) -> TaskFeature:
    head, _, payload = data.partition(b"\n")
    header = json.loads(head.decode("utf-8"))
    matrix = np.frombuffer(payload, dtype="<f8").reshape(header["rows"], header["cols"])
    return TaskFeature(
        matrix=matrix.astype(np.float64),
        client_id=int(header["client_id"]),
        round_idx=int(header["round"]),
    )
