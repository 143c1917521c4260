"""Command-line entry point: dataset generation, training runs, ablation
grids, aggregate reports, and per-run diagnostics.

Exit codes: 0 success, 2 usage/config error, 3 runtime abort (partial-run
marker written), 4 partial ablation grid.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics, figures, training
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_dataset,
    dump_config,
    load_config,
    parse_config,
)
from .data import load_dataset, save_dataset
from .nn import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3
EXIT_PARTIAL = 4

OUT_ROOT_ENV = "CGMATCH_OUT_ROOT"

log = logging.getLogger("cgmatch")


def _resolve_out(path: str) -> Path:
    """Relative output paths land under $CGMATCH_OUT_ROOT (default: cwd)."""
    out = Path(path)
    if not out.is_absolute():
        out = Path(os.environ.get(OUT_ROOT_ENV, ".")) / out
    return out


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=cfg)
    overrides = list(getattr(args, "set", None) or [])
    # shortcut flags become overrides so the resolved merge is what persists
    for flag, target in (
        ("seed", "training.seed"),
        ("method", "training.method"),
        ("mode", "selection.mode"),
        ("iters", "training.total_iters"),
        ("warmup", "training.warmup_iters"),
        ("eval_every", "training.eval_every"),
        ("clamp", "selection.clamp"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{target}={value}")
    cfg = apply_overrides(cfg, overrides)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=str(_resolve_out(args.out)))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args).validate()
    dataset = build_dataset(cfg)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    print(f"wrote {out} ({dataset.n_labeled} labeled / {dataset.n_unlabeled} unlabeled "
          f"/ {dataset.n_test} test, k={dataset.k}, d={dataset.d})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args).validate()
    if not cfg.out_dir:
        raise ConfigError("training.out_dir: required (pass --out)")
    try:
        artifacts = training.run(cfg)
    except NonFiniteError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    final = artifacts.eval_curve[-1] if artifacts.eval_curve else {}
    print(
        f"completed {cfg.method} run in {artifacts.run_dir} "
        f"(final accuracy {final.get('test_accuracy', float('nan')):.4f})"
    )
    return EXIT_OK


def _run_cell(payload: tuple[str, str]) -> tuple[str, int, float | None, str]:
    """Ablation worker: returns (mode, seed, final top-1 error, status)."""
    config_text, out_dir = payload
    cfg = parse_config(config_text)
    cfg = replace(cfg, out_dir=out_dir)
    try:
        artifacts = training.run(cfg)
        final_acc = artifacts.eval_curve[-1]["test_accuracy"]
        return cfg.mode, cfg.seed, 1.0 - final_acc, "ok"
    except Exception as exc:  # cell failures recorded, grid continues
        return cfg.mode, cfg.seed, None, f"failed: {exc}"


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_root = _resolve_out(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    cells: list[tuple[str, int]] = []
    for mode in modes:
        for seed in seeds:
            if (mode, seed) not in cells:
                cells.append((mode, seed))
    payloads = []
    for mode, seed in cells:
        cfg = replace(base, mode=mode, seed=seed, out_dir=None)
        cfg.validate()
        payloads.append((dump_config(cfg), str(out_root / f"{mode}_seed{seed}")))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]

    by_mode: dict[str, list[float]] = {m: [] for m in modes}
    failures = []
    for mode, seed, error, status in results:
        if status == "ok":
            by_mode[mode].append(error)
        else:
            failures.append((mode, seed, status))
            log.error("cell %s seed %d %s", mode, seed, status)
    rows = []
    for mode in modes:
        errs = by_mode[mode]
        rows.append(
            {
                "mode": mode,
                "runs": len(errs),
                "error_mean": statistics.mean(errs) if errs else None,
                "error_std": statistics.pstdev(errs) if errs else None,
                "failed": sum(1 for f in failures if f[0] == mode),
            }
        )
    table_path = out_root / "ablation.tsv"
    diagnostics.write_table(
        table_path, ["mode", "runs", "error_mean", "error_std", "failed"], rows
    )
    print(f"wrote {table_path}")
    for row in rows:
        mean = row["error_mean"]
        std = row["error_std"]
        if mean is None:
            print(f"  {row['mode']}: all cells failed")
        else:
            print(f"  {row['mode']}: top-1 error {mean:.4f} +- {std:.4f} over {row['runs']} seeds")
    return EXIT_PARTIAL if failures else EXIT_OK


def _load_run(run_dir: Path) -> dict:
    cfg = load_config(run_dir / "config.ini")
    _, _, eval_rows = diagnostics.read_table(run_dir / "eval_curve.tsv")
    status = (run_dir / training.STATUS_FILE).read_text().strip()
    records = diagnostics.read_jsonl(run_dir / "dynamics.jsonl")
    steps = [r for r in records if r["kind"] == "step"]
    return {
        "dir": run_dir,
        "config": cfg,
        "eval": eval_rows,
        "status": status,
        "steps": steps,
        "records": records,
        "dataset_digest": hashlib.sha256((run_dir / "dataset.tsv").read_bytes()).hexdigest(),
    }


def cmd_report(args) -> int:
    runs = [_load_run(Path(d)) for d in args.run_dirs]
    if not runs:
        raise ConfigError("report needs at least one run directory")
    for run in runs[1:]:
        if run["dataset_digest"] != runs[0]["dataset_digest"]:
            raise ConfigError(
                f"{run['dir']}: dataset differs from {runs[0]['dir']}; refusing to mix"
            )
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_method: dict[str, list[dict]] = {}
    for run in runs:
        by_method.setdefault(run["config"].method, []).append(run)

    rows = []
    acc_series: dict[str, tuple[list, list]] = {}
    ece_series: dict[str, tuple[list, list]] = {}
    util_series: dict[str, tuple[list, list]] = {}
    for method in sorted(by_method):
        group = by_method[method]
        finals_err = [1.0 - r["eval"][-1]["test_accuracy"] for r in group if r["eval"]]
        finals_ece = [r["eval"][-1]["test_ece"] for r in group if r["eval"]]
        used = []
        for r in group:
            for step in r["steps"]:
                batch = step.get("batch_unlabeled") or 0
                if batch:
                    used.append((step["n_easy"] + step["n_ambiguous"]) / batch)
        rows.append(
            {
                "method": method,
                "runs": len(group),
                "error_mean": statistics.mean(finals_err),
                "error_std": statistics.pstdev(finals_err),
                "ece_mean": statistics.mean(finals_ece),
                "ece_std": statistics.pstdev(finals_ece),
                "mean_used_ratio": statistics.mean(used) if used else None,
            }
        )
        # seed-averaged curves on the common iteration grid
        grids = [
            {row["iteration"]: row for row in r["eval"]} for r in group
        ]
        common = sorted(set.intersection(*(set(g) for g in grids))) if grids else []
        if common:
            acc_series[method] = (
                common,
                [statistics.mean(g[i]["test_accuracy"] for g in grids) for i in common],
            )
            ece_series[method] = (
                common,
                [statistics.mean(g[i]["test_ece"] for g in grids) for i in common],
            )
        step_grids = [{s["t"]: s for s in r["steps"]} for r in group if r["steps"]]
        step_common = (
            sorted(set.intersection(*(set(g) for g in step_grids))) if step_grids else []
        )
        if step_common:
            util_series[method] = (
                step_common,
                [
                    statistics.mean(
                        (g[t]["n_easy"] + g[t]["n_ambiguous"]) / g[t]["batch_unlabeled"]
                        for g in step_grids
                    )
                    for t in step_common
                ],
            )

    diagnostics.write_table(
        out / "report.tsv",
        ["method", "runs", "error_mean", "error_std", "ece_mean", "ece_std", "mean_used_ratio"],
        rows,
    )
    figures.plot_curves(acc_series, "test accuracy", out / "accuracy_curves.png")
    figures.plot_curves(ece_series, "test ECE", out / "ece_curves.png")
    figures.plot_curves(
        util_series, "used fraction of unlabeled batch", out / "utilization_curves.png"
    )
    print(f"wrote {out / 'report.tsv'} and figures for {len(runs)} runs")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    run = _load_run(Path(args.run_dir))
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(run["dir"] / "dataset.tsv")
    gold_by_id = dict(zip(dataset.unlabeled_ids.tolist(), dataset.eval_gold().tolist()))

    snapshots = [r for r in run["records"] if r["kind"] == "snapshot"]
    for rec in snapshots:
        if rec["p_ref"] is None:
            rec["p_ref"] = float(np.nan)
    points, omitted = diagnostics.data_map(snapshots) if snapshots else ([], 0)
    diagnostics.export_data_map(points, out / "data_map.tsv", omitted)
    figures.plot_data_map(points, out / "data_map.png")

    if run["steps"]:
        util_rows = diagnostics.utilization_series(run["steps"])
        subset_rows = diagnostics.subset_table_from_steps(run["steps"])
    else:
        util_rows, subset_rows = [], []
    diagnostics.write_table(
        out / "utilization.tsv",
        ["iteration", "n_easy", "n_ambiguous", "n_used", "batch_unlabeled", "used_ratio"],
        util_rows,
    )
    figures.plot_utilization(util_rows, out / "utilization.png")
    diagnostics.write_table(
        out / "subset_accuracy.tsv",
        ["iteration", "subset", "n", "n_correct", "accuracy"],
        subset_rows,
    )
    figures.plot_subset_accuracy(subset_rows, out / "subset_accuracy.png")

    evals = run["eval"]
    figures.plot_curves(
        {"accuracy": ([r["iteration"] for r in evals], [r["test_accuracy"] for r in evals])},
        "test accuracy",
        out / "accuracy_curve.png",
    )
    figures.plot_curves(
        {"ece": ([r["iteration"] for r in evals], [r["test_ece"] for r in evals])},
        "test ECE",
        out / "ece_curve.png",
    )
    print(f"wrote diagnostics for {run['dir']} to {out} (gold labels for {len(gold_by_id)} samples)")
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (sectioned key=value)")
    parser.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override a config field; wins over the file",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgmatch",
        description="Count-Gap guided semi-supervised learning on synthetic benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset file")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training configuration")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=["cgmatch", "fixmatch", "supervised"])
    p.add_argument("--mode", choices=["global_ema", "self_adaptive", "fixed"])
    p.add_argument("--iters", type=int, help="total iterations")
    p.add_argument("--warmup", type=int, help="warm-up iterations")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--clamp", metavar="LO:HI", help="confidence threshold clamp range")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="grid of thresholding modes x seeds")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="grid output directory")
    p.add_argument("--modes", default="global_ema,self_adaptive")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate finished runs into tables and figures")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diagnose", help="data map, utilization and subset tables for one run")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
