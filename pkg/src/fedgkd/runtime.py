"""Round-based federated loop with personalized aggregation and baselines.

One coordinator owns the loop; each client state holds only its own
subgraph. Every round: clients train full-batch Adam from their received
model (with a proximal pull toward it when the method asks for one),
metrics are recorded on the freshly trained personalized models, the
method-specific aggregation produces the next round's broadcast, and early
stopping tracks the best mean validation accuracy. All client randomness
derives from ``(seed, round, client)`` streams, so results are independent
of execution order.

Methods: ``fedgkd`` (distill -> relate -> kernelized mixing), ``local``
(no communication), ``fedavg`` (uniform mean), ``fedprox`` (uniform mean
plus a fixed proximal coefficient locally), ``fedper`` (uniform mean of
GCN layers only; readout stays local).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from fedgkd.distill import (
    DistillResult,
    distill_round,
    serialize_task_feature,
    server_init_distill,
)
from fedgkd.graphs import Graph, normalize
from fedgkd.nn import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward,
    init_adam,
    init_params,
    loss_ce,
    loss_ce_grad,
    prox_penalty,
)
from fedgkd.partitioning import FederatedSplit
from fedgkd.relator import aggregate, compute_relations, relate, uniform_mixing

METHODS = ("fedgkd", "local", "fedavg", "fedprox", "fedper")


@dataclass
class FedConfig:
    """Hyperparameters of one federated run."""

    num_clients: int
    max_rounds: int = 100
    local_epochs: int = 3
    distill_steps: int = 10
    lr: float = 0.01
    distill_lr: float = 0.01
    prox_weight: float = 1e-3  # proximal pull toward the received model (fedgkd)
    gamma: float = 0.75  # distilled-edge sparsity penalty
    tau_g: float = 1.0  # Gumbel temperature
    tau: float = 0.25  # matrix-exponential temperature
    tau_s: float = 5.0  # element-wise exponential temperature
    nodes_per_class: int = 2  # distilled nodes per class (m)
    method: str = "fedgkd"
    patience: int = 20
    seed: int = 0
    hidden_dim: int = 128
    weight_decay: float = 1e-6
    fedprox_mu: float = 1e-3  # fixed proximal coefficient of the fedprox baseline
    feature_map: str = "x_h"
    distill_mode: str = "dynamic"
    force_uniform_q: bool = False  # debug switch: bypass the kernel mixing

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        for name in ("lr", "distill_lr", "gamma", "tau_g", "tau", "tau_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.prox_weight < 0 or self.fedprox_mu < 0:
            raise ValueError("proximal weights must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.local_epochs < 0 or self.distill_steps < 0:
            raise ValueError("epoch/step counts must be >= 0")
        if self.nodes_per_class < 1:
            raise ValueError("nodes_per_class must be >= 1")
        if self.distill_mode == "static":
            raise NotImplementedError(
                "static (pre-federation) distillation is a recognized but "
                "unimplemented mode; use distill_mode='dynamic'"
            )
        if self.distill_mode != "dynamic":
            raise ValueError(f"unknown distill_mode {self.distill_mode!r}")


@dataclass
class RoundRecord:
    """Per-round, per-client metrics plus communication and timing."""

    round_idx: int
    train_loss: np.ndarray
    train_acc: np.ndarray
    val_loss: np.ndarray
    val_acc: np.ndarray
    test_loss: np.ndarray
    test_acc: np.ndarray
    bytes_up: np.ndarray
    bytes_down: np.ndarray
    soft_density: np.ndarray  # nan for non-distilling methods
    wall_time_s: float

    def mean_val_acc(self) -> float:
        return _nanmean(self.val_acc)

    def mean_test_acc(self) -> float:
        return _nanmean(self.test_acc)


def _nanmean(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else 0.0


def _nanstd(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(finite.std()) if finite.size else 0.0


@dataclass
class ClientState:
    """A client owns exactly its own subgraph and current model."""

    index: int
    graph: Graph
    adjacency: sp.csr_matrix
    params: ModelParams


@dataclass
class FederationResult:
    records: list[RoundRecord]
    best_round: int
    best_val_acc: float
    test_acc_at_best: float  # unweighted client mean
    test_acc_at_best_weighted: float  # node-count weighted client mean
    best_params: list[ModelParams]
    final_relations: np.ndarray | None
    final_mixing: np.ndarray | None
    aggregate_digests: list[tuple[str, ...]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# local training / evaluation
# ---------------------------------------------------------------------------


def local_train(
    graph: Graph,
    adjacency: sp.csr_matrix,
    start: ModelParams,
    anchor: ModelParams,
    epochs: int,
    lr: float,
    prox_weight: float,
    weight_decay: float = 1e-6,
    seed: int | None = None,
) -> ModelParams:
    """Full-batch Adam on masked cross-entropy plus a proximal pull.

    The anchor is held fixed for the whole call. Training is full-batch and
    therefore deterministic; ``seed`` is accepted for interface stability
    but unused. Fresh optimizer state per call. A client without any
    training nodes returns its start weights unchanged.
    """
    del seed
    params = start.copy()
    if epochs == 0 or not graph.train_mask.any():
        return params
    state: AdamState = init_adam(params, lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        trace = forward(params, adjacency, graph.features)
        loss = loss_ce(trace.logits, graph.labels, graph.train_mask)
        if prox_weight:
            loss += prox_penalty(params, anchor, prox_weight)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite training loss on client graph ({graph.num_nodes} nodes)")
        d_logits = loss_ce_grad(trace.logits, graph.labels, graph.train_mask)
        back = backward(trace, d_logits, prox=(prox_weight, anchor))
        params = adam_step(state, params, back.grads)
    return params


def evaluate(params: ModelParams, adjacency: sp.csr_matrix, graph: Graph) -> dict[str, float]:
    """Loss/accuracy per split; empty masks yield nan metrics."""
    trace = forward(params, adjacency, graph.features)
    pred = trace.logits.argmax(axis=1)
    out: dict[str, float] = {}
    for name, mask in (
        ("train", graph.train_mask),
        ("val", graph.val_mask),
        ("test", graph.test_mask),
    ):
        if mask.any():
            out[f"{name}_acc"] = float((pred[mask] == graph.labels[mask]).mean())
            out[f"{name}_loss"] = loss_ce(trace.logits, graph.labels, mask)
        else:
            out[f"{name}_acc"] = float("nan")
            out[f"{name}_loss"] = float("nan")
    return out


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------


@dataclass
class FederationState:
    config: FedConfig
    clients: list[ClientState]
    round_idx: int = 0
    relations: np.ndarray | None = None
    mixing: np.ndarray | None = None
    last_record: RoundRecord | None = None
    last_trained: list[ModelParams] | None = None
    last_digest: tuple[str, ...] | None = None
    dump_dir: Path | None = None


def _params_bytes(params: ModelParams) -> int:
    return params.size * 8


def _digest(params_list: list[ModelParams]) -> tuple[str, ...]:
    return tuple(hashlib.sha256(p.flatten().tobytes()).hexdigest() for p in params_list)


def _train_clients(state: FederationState, prox_weight: float) -> list[ModelParams]:
    cfg = state.config
    trained = []
    for client in state.clients:
        trained.append(
            local_train(
                client.graph,
                client.adjacency,
                start=client.params,
                anchor=client.params,
                epochs=cfg.local_epochs,
                lr=cfg.lr,
                prox_weight=prox_weight,
                weight_decay=cfg.weight_decay,
            )
        )
    return trained


def _metrics_arrays(state: FederationState, trained: list[ModelParams]) -> dict[str, np.ndarray]:
    rows = [evaluate(p, c.adjacency, c.graph) for p, c in zip(trained, state.clients)]
    return {key: np.array([r[key] for r in rows]) for key in rows[0]}


def _finish_round(
    state: FederationState,
    trained: list[ModelParams],
    next_params: list[ModelParams],
    bytes_up: np.ndarray,
    bytes_down: np.ndarray,
    soft_density: np.ndarray,
    started: float,
) -> RoundRecord:
    metrics = _metrics_arrays(state, trained)
    record = RoundRecord(
        round_idx=state.round_idx,
        train_loss=metrics["train_loss"],
        train_acc=metrics["train_acc"],
        val_loss=metrics["val_loss"],
        val_acc=metrics["val_acc"],
        test_loss=metrics["test_loss"],
        test_acc=metrics["test_acc"],
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        soft_density=soft_density,
        wall_time_s=time.perf_counter() - started,
    )
    state.last_digest = _digest(next_params)
    for client, params in zip(state.clients, next_params):
        client.params = params
    state.last_record = record
    state.last_trained = trained
    return record


def run_round_fedgkd(state: FederationState) -> RoundRecord:
    """Train, distill, relate, and personalize-aggregate one round."""
    cfg = state.config
    started = time.perf_counter()
    n = len(state.clients)
    trained = _train_clients(state, cfg.prox_weight)

    feature_dim = state.clients[0].graph.feature_dim
    num_classes = state.clients[0].graph.num_classes
    init = server_init_distill(
        cfg.nodes_per_class, num_classes, feature_dim, [cfg.seed, state.round_idx, 0]
    )
    init_bytes = init.x0.size * 8 + init.y0.size * 8

    features = []
    densities = np.zeros(n)
    task_bytes = np.zeros(n, dtype=np.int64)
    for i, params in enumerate(trained):
        try:
            result: DistillResult = distill_round(
                init,
                params,
                distill_steps=cfg.distill_steps,
                lr=cfg.distill_lr,
                gamma=cfg.gamma,
                tau_g=cfg.tau_g,
                seed=[cfg.seed, state.round_idx, i],
                feature_map=cfg.feature_map,
                client_id=i,
                round_idx=state.round_idx,
            )
        except Exception as exc:
            raise RuntimeError(f"round {state.round_idx}: client {i} failed: {exc}") from exc
        features.append(result.task_feature)
        densities[i] = result.mean_soft_density
        task_bytes[i] = len(serialize_task_feature(result.task_feature))

    if n == 1:
        state.relations = np.ones((1, 1))
        state.mixing = np.ones((1, 1))
    else:
        relations = compute_relations(features)
        kernel_state = relate(relations, cfg.tau, cfg.tau_s)
        state.relations = relations.values
        state.mixing = uniform_mixing(n) if cfg.force_uniform_q else kernel_state.mixing
        if state.dump_dir is not None:
            _dump_matrices(state.dump_dir, state.round_idx, relations.values,
                           kernel_state.connectivity, state.mixing)
    next_params = aggregate(trained, state.mixing)
    pb = _params_bytes(trained[0])
    bytes_up = np.asarray(task_bytes) + pb
    bytes_down = np.full(n, pb + init_bytes, dtype=np.int64)
    return _finish_round(state, trained, next_params, bytes_up, bytes_down, densities, started)


def run_round_baseline(state: FederationState) -> RoundRecord:
    """One round of local / fedavg / fedprox / fedper."""
    cfg = state.config
    method = cfg.method
    started = time.perf_counter()
    n = len(state.clients)
    prox = cfg.fedprox_mu if method == "fedprox" else 0.0
    trained = _train_clients(state, prox)
    pb = _params_bytes(trained[0])
    densities = np.full(n, np.nan)
    if method == "local":
        next_params = trained
        bytes_up = np.zeros(n, dtype=np.int64)
        bytes_down = np.zeros(n, dtype=np.int64)
    elif method in ("fedavg", "fedprox"):
        next_params = aggregate(trained, uniform_mixing(n))
        bytes_up = np.full(n, pb, dtype=np.int64)
        bytes_down = np.full(n, pb, dtype=np.int64)
    elif method == "fedper":
        averaged = aggregate(trained, uniform_mixing(n))
        next_params = [
            ModelParams(w1=a.w1, w2=a.w2, w_out=t.w_out.copy(), b_out=t.b_out.copy())
            for a, t in zip(averaged, trained)
        ]
        shared = (trained[0].w1.size + trained[0].w2.size) * 8
        bytes_up = np.full(n, shared, dtype=np.int64)
        bytes_down = np.full(n, shared, dtype=np.int64)
    else:
        raise ValueError(f"run_round_baseline cannot run method {method!r}")
    return _finish_round(state, trained, next_params, bytes_up, bytes_down, densities, started)


def _dump_matrices(dump_dir: Path, round_idx: int, relations: np.ndarray,
                   connectivity: np.ndarray, mixing: np.ndarray) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    for name, mat in (("relations", relations), ("connectivity", connectivity), ("mixing", mixing)):
        np.savetxt(dump_dir / f"{name}_round{round_idx:04d}.csv", mat, delimiter=",", fmt="%.12g")


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def run_federation(
    config: FedConfig,
    split: FederatedSplit,
    dump_dir: str | Path | None = None,
) -> FederationResult:
    """Run rounds until the horizon or early stopping; checkpoint the best round.

    Early stopping halts after ``patience`` consecutive rounds without a new
    best mean validation accuracy; the reported test accuracy always comes
    from the round that achieved the best validation mean.
    """
    config.validate()
    if split.num_clients != config.num_clients:
        raise ValueError(
            f"config expects {config.num_clients} clients, split has {split.num_clients}"
        )
    common_init = init_params(
        split.client_graphs[0].feature_dim,
        config.hidden_dim,
        split.client_graphs[0].num_classes,
        config.seed,
    )
    clients = [
        ClientState(index=i, graph=g, adjacency=normalize(g), params=common_init.copy())
        for i, g in enumerate(split.client_graphs)
    ]
    state = FederationState(
        config=config,
        clients=clients,
        dump_dir=Path(dump_dir) if dump_dir is not None else None,
    )
    node_counts = np.array([g.num_nodes for g in split.client_graphs], dtype=np.float64)

    records: list[RoundRecord] = []
    digests: list[tuple[str, ...]] = []
    best_val = -np.inf
    best_round = 0
    best_params: list[ModelParams] = [c.params.copy() for c in clients]
    best_test = 0.0
    best_test_weighted = 0.0
    stall = 0
    for round_idx in range(1, config.max_rounds + 1):
        state.round_idx = round_idx
        if config.method == "fedgkd":
            record = run_round_fedgkd(state)
        else:
            record = run_round_baseline(state)
        records.append(record)
        digests.append(state.last_digest)

        val = record.mean_val_acc()
        if val > best_val:
            best_val = val
            best_round = round_idx
            best_params = [p.copy() for p in state.last_trained]
            best_test = record.mean_test_acc()
            finite = np.isfinite(record.test_acc)
            if finite.any():
                best_test_weighted = float(
                    np.average(record.test_acc[finite], weights=node_counts[finite])
                )
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    return FederationResult(
        records=records,
        best_round=best_round,
        best_val_acc=float(best_val),
        test_acc_at_best=best_test,
        test_acc_at_best_weighted=best_test_weighted,
        best_params=best_params,
        final_relations=state.relations,
        final_mixing=state.mixing,
        aggregate_digests=digests,
    )


# ---------------------------------------------------------------------------
# record CSV
# ---------------------------------------------------------------------------

_CSV_COLUMNS = (
    "round,client,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc,"
    "bytes_up,bytes_down,soft_density,val_acc_std,test_acc_std,wall_time_s"
)


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.10g}"


def write_records_csv(
    records: list[RoundRecord], path: str | Path, config_hash: str, seed: int
) -> None:
    """One row per round per client plus a summary row of client means/stds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"# config_hash={config_hash} seed={seed}\n")
        fh.write(_CSV_COLUMNS + "\n")
        for rec in records:
            n = len(rec.train_loss)
            for i in range(n):
                fh.write(
                    f"{rec.round_idx},{i},{_fmt(rec.train_loss[i])},{_fmt(rec.train_acc[i])},"
                    f"{_fmt(rec.val_loss[i])},{_fmt(rec.val_acc[i])},"
                    f"{_fmt(rec.test_loss[i])},{_fmt(rec.test_acc[i])},{int(rec.bytes_up[i])},"
                    f"{int(rec.bytes_down[i])},{_fmt(rec.soft_density[i])},,,"
                    f"{rec.wall_time_s:.6f}\n"
                )
            fh.write(
                f"{rec.round_idx},summary,{_fmt(_nanmean(rec.train_loss))},"
                f"{_fmt(_nanmean(rec.train_acc))},{_fmt(_nanmean(rec.val_loss))},"
                f"{_fmt(rec.mean_val_acc())},{_fmt(_nanmean(rec.test_loss))},"
                f"{_fmt(rec.mean_test_acc())},{int(rec.bytes_up.sum())},"
                f"{int(rec.bytes_down.sum())},{_fmt(_nanmean(rec.soft_density))},"
                f"{_fmt(_nanstd(rec.val_acc))},{_fmt(_nanstd(rec.test_acc))},"
                f"{rec.wall_time_s:.6f}\n"
            )
