"""Command-line benchmark harness.

Subcommands:

* ``run``: split the data and run the federation for every method/seed in
  the manifest; writes per-seed round CSVs, a summary JSON, convergence
  TSV, parameter checkpoints, and report figures.
* ``grid``: Cartesian hyperparameter sweep with a ranked results table.
* ``convert``: rewrite external dataset formats into the canonical
  directory layout.
* ``verify``: run the acceptance suite and print a pass/fail table.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
``FEDGKD_SEED`` overrides manifest seeds.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from fedgkd.convert import ConversionError, convert_edge_list, convert_planetoid_raw
from fedgkd.graphs import DatasetError
from fedgkd.manifest import (
    CONFIG_KEYS,
    DEFAULT_GRID,
    GRID_KEYS,
    ExperimentManifest,
    ManifestError,
    build_config,
    build_split,
    config_hash,
    load_manifest,
)
from fedgkd.nn import save_params
from fedgkd.runtime import FederationResult, run_federation, write_records_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _run_single(
    manifest: ExperimentManifest,
    method: str,
    seed: int,
    extra_overrides: dict[str, Any] | None = None,
    write_outputs: bool = True,
) -> tuple[FederationResult, dict[str, Any]]:
    split = build_split(manifest, seed)
    config = build_config(manifest, method, seed, split.num_clients, extra_overrides)
    chash = config_hash(manifest, extra=extra_overrides)
    out_dir = manifest.output_dir / method / f"seed_{seed}"
    dump_dir = out_dir / "relations" if (manifest.dump_relations and write_outputs) else None
    result = run_federation(config, split, dump_dir=dump_dir)
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_records_csv(result.records, out_dir / "rounds.csv", chash, seed)
        for i, params in enumerate(result.best_params):
            save_params(params, out_dir / f"client_{i}.params")
        if method == "fedgkd" and result.final_relations is not None:
            from fedgkd.plots import plot_relation_heatmaps

            plot_relation_heatmaps(
                result.final_relations, result.final_mixing, out_dir / "relations_final.png"
            )
    summary = {
        "seed": seed,
        "best_round": result.best_round,
        "rounds_run": len(result.records),
        "val_acc": result.best_val_acc,
        "test_acc": result.test_acc_at_best,
        "test_acc_weighted": result.test_acc_at_best_weighted,
        "mean_soft_density": float(
            np.nanmean([r.soft_density for r in result.records])
        ) if method == "fedgkd" else None,
    }
    return result, summary


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def cmd_run(manifest: ExperimentManifest) -> int:
    """Execute split -> federation per method and seed; write all artifacts."""
    started = time.perf_counter()
    manifest.output_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(manifest)
    curves: dict[str, dict[int, list[tuple[int, float]]]] = {}
    methods_summary: dict[str, Any] = {}
    conv_rows: list[str] = []
    for method in manifest.methods:
        per_seed = []
        curves[method] = {}
        for seed in manifest.seeds:
            result, summary = _run_single(manifest, method, seed)
            per_seed.append(summary)
            curve = [(rec.round_idx, rec.mean_test_acc()) for rec in result.records]
            curves[method][seed] = curve
            for rec in result.records:
                conv_rows.append(
                    f"{method}\t{seed}\t{rec.round_idx}\t{rec.mean_test_acc():.10g}"
                    f"\t{rec.mean_val_acc():.10g}"
                )
        test_mean, test_std = _mean_std([s["test_acc"] for s in per_seed])
        wtest_mean, wtest_std = _mean_std([s["test_acc_weighted"] for s in per_seed])
        methods_summary[method] = {
            "per_seed": per_seed,
            "test_acc_mean": test_mean,
            "test_acc_std": test_std,
            "test_acc_weighted_mean": wtest_mean,
            "test_acc_weighted_std": wtest_std,
        }
        print(f"{method}: test acc {test_mean:.4f} ± {test_std:.4f} over {len(per_seed)} seed(s)")

    with (manifest.output_dir / "convergence.tsv").open("w") as fh:
        fh.write(f"# config_hash={chash}\n")
        fh.write("method\tseed\tround\tmean_test_acc\tmean_val_acc\n")
        fh.write("\n".join(conv_rows) + "\n")
    summary = {
        "config_hash": chash,
        "seeds": manifest.seeds,
        "methods": methods_summary,
        "wall_time_s": time.perf_counter() - started,
    }
    (manifest.output_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    from fedgkd.plots import plot_convergence

    plot_convergence(curves, manifest.output_dir / "convergence.png")
    print(f"wrote {manifest.output_dir / 'summary.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------


def _grid_cell(args: tuple[ExperimentManifest, str, dict[str, Any]]) -> dict[str, Any]:
    manifest, method, cell = args
    val_accs, test_accs, densities = [], [], []
    for seed in manifest.seeds:
        _, summary = _run_single(manifest, method, seed, extra_overrides=cell, write_outputs=False)
        val_accs.append(summary["val_acc"])
        test_accs.append(summary["test_acc"])
        if summary["mean_soft_density"] is not None:
            densities.append(summary["mean_soft_density"])
    row = dict(cell)
    row["mean_val_acc"] = float(np.mean(val_accs))
    row["mean_test_acc"] = float(np.mean(test_accs))
    row["mean_soft_density"] = float(np.mean(densities)) if densities else float("nan")
    return row


def cmd_grid(manifest: ExperimentManifest, jobs: int = 1) -> int:
    """Cartesian sweep; emit a table ranked by mean validation accuracy."""
    if not manifest.grid:
        raise ManifestError("grid run requires swept keys (manifest 'grid' or --grid)")
    keys = list(manifest.grid.keys())
    values = []
    for key in keys:
        given = manifest.grid[key]
        values.append([float(v) if key != "E_t" else int(v) for v in (given or DEFAULT_GRID[key])])
    method = manifest.methods[0]
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*values)]
    print(f"grid: {len(cells)} cell(s) over {keys}, method={method}, seeds={manifest.seeds}")

    work = [(manifest, method, cell) for cell in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_grid_cell, work))
    else:
        rows = [_grid_cell(w) for w in work]
    rows.sort(key=lambda r: -r["mean_val_acc"])

    manifest.output_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(manifest, extra={"grid": {k: list(v) for k, v in zip(keys, values)}})
    out = manifest.output_dir / "grid_results.tsv"
    with out.open("w") as fh:
        fh.write(f"# config_hash={chash} seeds={','.join(map(str, manifest.seeds))}\n")
        fh.write("rank\t" + "\t".join(keys) + "\tmean_val_acc\tmean_test_acc\tmean_soft_density\n")
        for rank, row in enumerate(rows, start=1):
            cells_txt = "\t".join(f"{row[k]:.10g}" for k in keys)
            fh.write(
                f"{rank}\t{cells_txt}\t{row['mean_val_acc']:.10g}"
                f"\t{row['mean_test_acc']:.10g}\t{row['mean_soft_density']:.10g}\n"
            )
    from fedgkd.plots import plot_grid_ranking

    plot_grid_ranking(rows, keys, manifest.output_dir / "grid_ranking.png")
    header = " | ".join(keys)
    print(f"rank | {header} | val_acc | test_acc")
    for rank, row in enumerate(rows[:10], start=1):
        cells_txt = " | ".join(f"{row[k]:g}" for k in keys)
        print(f"{rank:4d} | {cells_txt} | {row['mean_val_acc']:.4f} | {row['mean_test_acc']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parse_set_overrides(pairs: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ManifestError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ManifestError(f"unknown override key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _parse_grid_args(pairs: list[str]) -> dict[str, list[float] | None]:
    out: dict[str, list[float] | None] = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in GRID_KEYS:
            raise ManifestError(f"unknown grid key {key!r}; expected one of {GRID_KEYS}")
        out[key] = [float(v) for v in raw.split(",")] if raw else None
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgkd", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the federation per manifest")
    run_p.add_argument("--manifest", required=True)
    run_p.add_argument("--output-dir", default=None)
    run_p.add_argument("--method", action="append", default=None,
                       help="override manifest methods (repeatable)")
    run_p.add_argument("--seed", action="append", type=int, default=None,
                       help="override manifest seeds (repeatable)")
    run_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (repeatable)")
    run_p.add_argument("--dump-relations", action="store_true",
                       help="dump per-round relation/connectivity/mixing CSVs")

    grid_p = sub.add_parser("grid", help="hyperparameter grid sweep")
    grid_p.add_argument("--manifest", required=True)
    grid_p.add_argument("--output-dir", default=None)
    grid_p.add_argument("--grid", action="append", default=[], metavar="KEY[=V1,V2,...]",
                        help="sweep a key; no values means the full default range")
    grid_p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    grid_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    conv_p = sub.add_parser("convert", help="convert external data to the canonical layout")
    conv_p.add_argument("--from", dest="src_format", required=True,
                        choices=["planetoid-raw", "edge-list"])
    conv_p.add_argument("--src", required=True)
    conv_p.add_argument("--dst", required=True)
    conv_p.add_argument("--name", default="cora", help="dataset name for planetoid-raw")
    conv_p.add_argument("--labels", default=None, help="labels file for edge-list")
    conv_p.add_argument("--features", default=None, help="features file for edge-list")
    conv_p.add_argument("--mask-seed", type=int, default=0)

    ver_p = sub.add_parser("verify", help="run the acceptance suite")
    ver_p.add_argument("--skip-slow", action="store_true",
                       help="skip criteria with multi-minute budgets")
    ver_p.add_argument("--strict-skips", action="store_true",
                       help="treat skipped criteria as failures")
    ver_p.add_argument("--cora-dir", default=None,
                       help="converted Cora dataset directory (default: data/cora)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            manifest = load_manifest(
                args.manifest,
                cli_overrides=_parse_set_overrides(args.set),
                methods=args.method,
                seeds=args.seed,
                output_dir=args.output_dir,
            )
            if args.dump_relations:
                manifest.dump_relations = True
            return cmd_run(manifest)
        if args.command == "grid":
            manifest = load_manifest(
                args.manifest,
                cli_overrides=_parse_set_overrides(args.set),
                output_dir=args.output_dir,
            )
            cli_grid = _parse_grid_args(args.grid)
            if cli_grid:
                manifest.grid.update(cli_grid)
            manifest.validate()
            return cmd_grid(manifest, jobs=args.jobs)
        if args.command == "convert":
            if args.src_format == "planetoid-raw":
                g = convert_planetoid_raw(args.src, args.dst, args.name, args.mask_seed)
            else:
                g = convert_edge_list(args.src, args.dst, args.labels, args.features,
                                      args.mask_seed)
            print(f"wrote {args.dst}: {g.num_nodes} nodes, {g.num_edges} edges, "
                  f"{g.feature_dim} features, {g.num_classes} classes")
            return EXIT_OK
        if args.command == "verify":
            from fedgkd.acceptance import run_acceptance

            return run_acceptance(
                skip_slow=args.skip_slow,
                strict_skips=args.strict_skips,
                cora_dir=args.cora_dir,
            )
    except (ManifestError, DatasetError, ConversionError, NotImplementedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
