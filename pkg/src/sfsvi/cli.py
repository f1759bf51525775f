"""Command-line entry point: ``run``, ``verify`` and ``report``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 missing or malformed data.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, FormatError, StateError
from .io import atomic_write_jsonl, atomic_write_text
from .metrics import (
    AccuracyMatrix,
    backward_transfer,
    export_uncertainty_grid,
    forward_transfer,
    mean_final_accuracy,
)
from .tasks import build_sequence
from .trainer import RunResult, run_sequence
from .verify import full_rank_frcl_diagnostic, report, timed_checks

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _err(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _jsonable(record: dict) -> dict:
    return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in record.items()}


def write_artifacts(cfg: RunConfig, result: RunResult, tasks) -> Path:
    """Write every run artifact under ``cfg.output_dir`` (each file atomically)."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", cfg.to_json())
    result.R.save(out / "R.csv")
    atomic_write_jsonl(out / "logs.jsonl", [_jsonable(r) for r in result.logs])
    for snap in result.snapshots:
        snap.save(out / "snapshots" / f"task_{snap.task}.json")
    if result.coreset is not None:
        result.coreset.save(out / "coreset.jsonl")
    summary = {"mean_accuracy": mean_final_accuracy(result.R)}
    if result.R.n_tasks > 1:
        summary["backward_transfer"] = backward_transfer(result.R)
    if result.R.independent is not None:
        summary["independent_accuracy"] = result.R.independent.tolist()
        if result.R.n_tasks > 1:
            summary["forward_transfer"] = forward_transfer(result.R)
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if result.arch.input_dim == 2:
        eps = np.random.default_rng([cfg.seed, 99]).standard_normal((cfg.method.train.eval_samples, result.arch.n_params))
        for snap in result.snapshots:
            grid = export_uncertainty_grid(snap, result.arch, cfg.grid_resolution, eps)
            grid.save(out / "heatmaps" / f"grid_task_{snap.task}.csv", out / "heatmaps" / f"task_{snap.task}.pgm")
    return out


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, subsample=args.subsample)
        if args.output_dir:
            cfg = RunConfig(cfg.sequence, cfg.method, args.output_dir, cfg.seed, cfg.data_dir, cfg.independent, cfg.grid_resolution)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        tasks = build_sequence(cfg.sequence, cfg.data_dir)
    except (DataError, FormatError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    result = run_sequence(
        tasks, cfg.sequence.architecture(), cfg.method, cfg.seed, independent=cfg.independent,
        progress=None if args.quiet else _err,
    )
    out = write_artifacts(cfg, result, tasks)
    print(f"mean accuracy {mean_final_accuracy(result.R):.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks, seconds = timed_checks(args.level, args.seed, args.mutate)
    print(report(checks))
    print("diagnostic:")
    print("  " + full_rank_frcl_diagnostic(args.seed).line())
    failed = [c.name for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {seconds:.1f}s")
    if failed:
        _err("failing checks: " + "; ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def mean_and_se(values: list[float]) -> tuple[float, float | None]:
    """Sample mean and standard error ``sd / sqrt(n)`` (``None`` for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(len(arr)))


def _run_label(directory: Path) -> str:
    cfg_path = directory / "config.json"
    if not cfg_path.is_file():
        return directory.name
    raw = json.loads(cfg_path.read_text())
    seq = raw.get("sequence", {})
    cap = raw.get("coreset", {}).get("capacity")
    return f"{raw.get('method')}/{seq.get('kind')}/{seq.get('head_mode')}/coreset={cap}"


def summarize_runs(directories: list[Path]) -> list[dict]:
    groups: dict[str, dict[str, list[float]]] = {}
    for d in directories:
        R = AccuracyMatrix.load(d / "R.csv")
        g = groups.setdefault(_run_label(d), {"acc": [], "bt": [], "ft": []})
        g["acc"].append(mean_final_accuracy(R))
        if R.n_tasks > 1:
            g["bt"].append(backward_transfer(R))
        summary = d / "summary.json"
        if summary.is_file():
            ind = json.loads(summary.read_text()).get("independent_accuracy")
            if ind is not None and R.n_tasks > 1:
                g["ft"].append(forward_transfer(R, np.array(ind)))
    rows = []
    for label, g in groups.items():
        row = {"label": label, "runs": len(g["acc"])}
        for key in ("acc", "bt", "ft"):
            mean, se = mean_and_se(g[key]) if g[key] else (None, None)
            row[key] = mean
            row[f"{key}_se"] = se
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.dirs]
    for d in dirs:
        if not (d / "R.csv").is_file():
            _err(f"data error: {d / 'R.csv'} not found")
            return EXIT_DATA
    try:
        rows = summarize_runs(dirs)
    except (FormatError, StateError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    fields = ["label", "runs", "acc", "acc_se", "bt", "bt_se", "ft", "ft_se"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([row["label"], row["runs"]] + [_fmt(row[f]) for f in fields[2:]])
    print(f"{'run group':<48s} {'n':>3s}  {'mean acc':>18s}  {'BT':>18s}  {'FT':>18s}")
    for row in rows:
        cells = []
        for key in ("acc", "bt", "ft"):
            mean, se = row[key], row[f"{key}_se"]
            cells.append("-" if mean is None else (f"{mean:.4f}" + (f" ± {se:.4f}" if se is not None else "")))
        print(f"{row['label']:<48s} {row['runs']:>3d}  {cells[0]:>18s}  {cells[1]:>18s}  {cells[2]:>18s}")
    if args.csv:
        atomic_write_text(args.csv, buf.getvalue())
    else:
        print()
        print(buf.getvalue(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfsvi", description="Function-space variational continual learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train through a task sequence and write artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--subsample", type=float)
    run.add_argument("--output-dir")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(fn=cmd_run)

    verify = sub.add_parser("verify", help="run the numerical self-checks")
    verify.add_argument("--level", choices=("quick", "full"), default="full")
    verify.add_argument("--mutate", action="store_true", help="flip the sign of the variance term in the FROMP check")
    verify.add_argument("--seed", type=int, default=0)
    verify.set_defaults(fn=cmd_verify)

    rep = sub.add_parser("report", help="summarize finished runs")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--csv", help="write the CSV table here instead of stdout")
    rep.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
