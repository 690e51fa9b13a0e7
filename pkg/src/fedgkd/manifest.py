"""Experiment manifests: JSON config, override precedence, split construction.

A manifest names the data (a dataset directory or a synthetic recipe), the
split, hyperparameter overrides, the methods to compare, repeat seeds, and
the output directory. CLI flags override file values; the ``FEDGKD_SEED``
environment variable overrides both. Every emitted artifact carries the
manifest's config hash plus the seed so any row can be reproduced from the
manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fedgkd.graphs import generate_sbm, load_dataset
from fedgkd.partitioning import (
    FederatedSplit,
    load_partition_file,
    overlapping_split,
    partition,
    sbm_group_split,
    split_from_assignment,
)
from fedgkd.runtime import METHODS, FedConfig

DEFAULT_SEEDS = [0, 1, 2]

# manifest/CLI override keys -> FedConfig attributes
CONFIG_KEYS = {
    "n": "num_clients",
    "T": "max_rounds",
    "E_t": "local_epochs",
    "E_d": "distill_steps",
    "lr": "lr",
    "lr_d": "distill_lr",
    "lambda": "prox_weight",
    "gamma": "gamma",
    "tau_g": "tau_g",
    "tau": "tau",
    "tau_s": "tau_s",
    "m": "nodes_per_class",
    "method": "method",
    "early_stop_patience": "patience",
    "seed": "seed",
    # long-form aliases
    "num_clients": "num_clients",
    "max_rounds": "max_rounds",
    "local_epochs": "local_epochs",
    "distill_steps": "distill_steps",
    "distill_lr": "distill_lr",
    "prox_weight": "prox_weight",
    "nodes_per_class": "nodes_per_class",
    "patience": "patience",
    "hidden_dim": "hidden_dim",
    "weight_decay": "weight_decay",
    "fedprox_mu": "fedprox_mu",
    "feature_map": "feature_map",
    "force_uniform_q": "force_uniform_q",
    "distill_mode": "distill_mode",
}

GRID_KEYS = ("lr", "E_t", "gamma", "tau_s", "tau", "lambda")

# the full grid-search ranges used when a swept key gives no explicit values
DEFAULT_GRID = {
    "lr": [0.005, 0.01],
    "E_t": [1, 3, 5, 7],
    "gamma": [0.001, 0.75, 1.5, 2.5, 5.0],
    "tau_s": [1.0, 3.0, 5.0, 7.0, 9.0],
    "tau": [0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
    "lambda": [1e-5, 1e-3],
}


class ManifestError(ValueError):
    """Invalid manifest or CLI configuration."""


@dataclass
class ExperimentManifest:
    output_dir: Path
    seeds: list[int]
    methods: list[str]
    overrides: dict[str, Any]
    dataset: Path | None = None
    synthetic: dict[str, Any] | None = None
    split_mode: str = "non-overlapping"
    num_clients: int = 0
    partition_file: Path | None = None
    dump_relations: bool = False
    grid: dict[str, list[float] | None] = field(default_factory=dict)

    def validate(self) -> None:
        if (self.dataset is None) == (self.synthetic is None):
            raise ManifestError("exactly one of 'dataset' or 'synthetic' must be given")
        if self.dataset is not None and not self.dataset.is_dir():
            raise ManifestError(f"dataset directory not found: {self.dataset}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ManifestError("seeds must be distinct")
        if not self.seeds:
            raise ManifestError("at least one seed is required")
        for m in self.methods:
            if m not in METHODS:
                raise ManifestError(f"unknown method {m!r}; expected one of {METHODS}")
        for key in self.overrides:
            if key not in CONFIG_KEYS:
                raise ManifestError(f"unknown override key {key!r}")
        for key in self.grid:
            if key not in GRID_KEYS:
                raise ManifestError(f"unknown grid key {key!r}; expected one of {GRID_KEYS}")
        if self.synthetic is None and self.num_clients < 2:
            raise ManifestError("split.clients must be >= 2 for dataset runs")


def _as_int_list(value: Any, name: str) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise ManifestError(f"{name} must be a list of integers")
    return list(value)


def load_manifest(
    path: str | Path,
    cli_overrides: dict[str, Any] | None = None,
    methods: list[str] | None = None,
    seeds: list[int] | None = None,
    output_dir: str | None = None,
) -> ExperimentManifest:
    """Read a JSON manifest and apply CLI/environment overrides."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a JSON object")

    split = raw.get("split", {})
    overrides = dict(raw.get("overrides", {}))
    if cli_overrides:
        overrides.update(cli_overrides)

    manifest_seeds = seeds or _as_int_list(raw.get("seeds", DEFAULT_SEEDS), "seeds")
    env_seed = os.environ.get("FEDGKD_SEED")
    if env_seed is not None:
        try:
            manifest_seeds = [int(env_seed)]
        except ValueError as exc:
            raise ManifestError(f"FEDGKD_SEED must be an integer, got {env_seed!r}") from exc

    manifest_methods = methods or raw.get("methods")
    if manifest_methods is None:
        manifest_methods = [overrides.get("method", "fedgkd")]

    manifest = ExperimentManifest(
        output_dir=Path(output_dir or raw.get("output_dir", "out")),
        seeds=manifest_seeds,
        methods=list(manifest_methods),
        overrides=overrides,
        dataset=Path(raw["dataset"]) if raw.get("dataset") else None,
        synthetic=raw.get("synthetic"),
        split_mode=split.get("mode", "non-overlapping"),
        num_clients=int(split.get("clients", 0)),
        partition_file=Path(split["partition_file"]) if split.get("partition_file") else None,
        dump_relations=bool(raw.get("dump_relations", False)),
        grid=dict(raw.get("grid", {})),
    )
    manifest.validate()
    return manifest


def config_hash(manifest: ExperimentManifest, extra: dict[str, Any] | None = None) -> str:
    """Stable hash of everything that determines results except seed/output paths."""
    payload = {
        "dataset": str(manifest.dataset) if manifest.dataset else None,
        "synthetic": manifest.synthetic,
        "split_mode": manifest.split_mode,
        "num_clients": manifest.num_clients,
        "partition_file": str(manifest.partition_file) if manifest.partition_file else None,
        "overrides": manifest.overrides,
        "methods": manifest.methods,
        "extra": extra or {},
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_split(manifest: ExperimentManifest, seed: int) -> FederatedSplit:
    """Materialize the federated split for one seed."""
    if manifest.synthetic is not None:
        recipe = dict(manifest.synthetic)
        kind = recipe.pop("kind", "sbm")
        if kind == "sbm_groups":
            groups = recipe.pop("groups")
            return sbm_group_split(
                group_sizes=[g["clients"] for g in groups],
                label_shifts=[g.get("label_shift", 0) for g in groups],
                seed=seed,
                **recipe,
            )
        if kind != "sbm":
            raise ManifestError(f"unknown synthetic kind {kind!r}")
        graph = generate_sbm(seed=seed, **recipe)
    else:
        graph = load_dataset(manifest.dataset)

    if manifest.partition_file is not None:
        assignment = load_partition_file(manifest.partition_file)
        split = split_from_assignment(graph, assignment, seed=seed)
        if manifest.num_clients and split.num_clients != manifest.num_clients:
            raise ManifestError(
                f"partition file defines {split.num_clients} parts, manifest says "
                f"{manifest.num_clients}"
            )
        return split
    if manifest.split_mode == "non-overlapping":
        return partition(graph, manifest.num_clients, seed)
    if manifest.split_mode == "overlapping":
        return overlapping_split(graph, manifest.num_clients, seed)
    raise ManifestError(f"unknown split mode {manifest.split_mode!r}")


def build_config(
    manifest: ExperimentManifest, method: str, seed: int, num_clients: int,
    extra_overrides: dict[str, Any] | None = None,
) -> FedConfig:
    """FedConfig from manifest overrides plus per-run method/seed/client count."""
    config = FedConfig(num_clients=num_clients, method=method, seed=seed)
    merged = dict(manifest.overrides)
    if extra_overrides:
        merged.update(extra_overrides)
    for key, value in merged.items():
        attr = CONFIG_KEYS[key]
        if attr == "num_clients":
            if int(value) != num_clients:
                raise ManifestError(
                    f"override {key}={value} conflicts with the split's "
                    f"{num_clients} clients"
                )
            continue
        if attr in ("method", "seed"):
            continue  # fixed per run
        current = getattr(config, attr)
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int):
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(config, attr, value)
    config.validate()
    return config
