"""``snmnet`` command line: generate, run, ablate, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime or numerical
error. Errors go to stderr as one JSON object; progress goes to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from snmnet.config import ExperimentConfig, load_config
from snmnet.dataio import Dataset, generate_synthetic, load_dataset, save_dataset
from snmnet.errors import ConfigError, LoadError, SNMError
from snmnet.evaluation.protocol import ExperimentReport, ablation_variants, run_protocol, split_fold
from snmnet.evaluation.report import (
    format_table,
    pooled_scores,
    read_scores_csv,
    write_metrics_csv,
    write_roc_svg,
    write_scores_csv,
    write_summary_json,
)

log = logging.getLogger("snmnet")


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    return load_dataset(cfg.data_path)


def cmd_generate(cfg: ExperimentConfig, out: Path | None = None, force: bool = False) -> Path:
    """Write the configured synthetic dataset to disk."""
    if cfg.synthetic is None:
        raise ConfigError("generate needs a 'dataset.synthetic' block")
    out = Path(out) if out is not None else cfg.output_dir / "dataset"
    _prepare_out(out, force)
    ds = generate_synthetic(cfg.synthetic)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples ({len(ds.class_names)} classes x {len(ds.position_names)} positions, "
          f"{ds.t_steps}x{ds.channels} maps) to {out}")
    return out


def _execute(cfg: ExperimentConfig, configs: dict, out: Path | None, force: bool, jobs: int,
             label: str) -> ExperimentReport:
    out = Path(out) if out is not None else cfg.output_dir
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to write into it)")
    ds = _dataset(cfg)
    positions = cfg.protocol.positions or range(len(ds.position_names))
    for p in positions:  # surface protocol errors before creating anything
        if not 0 <= p < len(ds.position_names):
            raise ConfigError(f"protocol.positions: index {p} out of range")
        for f in range(cfg.protocol.n_folds):
            split_fold(ds, p, f, cfg.seed, cfg.protocol)
    _prepare_out(out, force)
    n_runs = len(list(positions)) * cfg.protocol.n_folds * len(configs)
    print(f"{label}: {len(ds)} samples, {n_runs} trainings "
          f"({len(list(positions))} positions x {cfg.protocol.n_folds} folds x {len(configs)} configs)")
    t0 = time.perf_counter()
    report = run_protocol(ds, configs, cfg.protocol, cfg.seed, jobs,
                          model_dir=out / "models" if cfg.save_models else None)
    write_metrics_csv(report, out / "metrics.csv")
    write_scores_csv(report, out / "scores.csv")
    write_summary_json(report, out / "summary.json")
    (out / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    if cfg.roc_svg:
        write_roc_svg(pooled_scores(report), out / "roc.svg")
    table = format_table(report)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    print(f"done in {time.perf_counter() - t0:.1f} s; reports in {out}")
    return report


def cmd_run(cfg: ExperimentConfig, out: Path | None = None, force: bool = False, jobs: int = 1):
    return _execute(cfg, cfg.configs, out, force, jobs, "run")


def cmd_ablate(cfg: ExperimentConfig, out: Path | None = None, force: bool = False, jobs: int = 1):
    return _execute(cfg, ablation_variants(cfg.train), out, force, jobs, "ablate")


def _table_from_metrics_csv(path: Path) -> str:
    import numpy as np

    rows: dict[str, dict[str, list[float]]] = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            entry = rows.setdefault(row["config"], {"accuracy": [], "tpr": [], "auroc": []})
            for m in entry:
                entry[m].append(float(row[m]))
    lines = [f"{'config':<10} {'accuracy':>17} {'TPR@FPR':>17} {'AUROC':>17}"]
    for c, entry in rows.items():
        cells = []
        for m in ("accuracy", "tpr", "auroc"):
            v = np.asarray(entry[m])
            cells.append(f"{v.mean():.4f} ± {v.std(ddof=1):.4f}" if len(v) > 1 else f"{v.mean():.4f}")
        lines.append(f"{c:<10} {cells[0]:>17} {cells[1]:>17} {cells[2]:>17}")
    return "\n".join(lines)


def cmd_report(run_dir: Path, out: Path | None = None) -> Path:
    """Re-render the ROC plot (and print the table) from an existing run directory."""
    run_dir = Path(run_dir)
    curves = read_scores_csv(run_dir / "scores.csv")
    target = Path(out) if out is not None else run_dir / "roc.svg"
    write_roc_svg(curves, target)
    metrics = run_dir / "metrics.csv"
    if metrics.is_file():
        print(_table_from_metrics_csv(metrics))
    elif not curves:
        raise LoadError(f"{run_dir}: no scores to render")
    print(f"wrote {target}")
    return target


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snmnet", description="Open-set gas recognition experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every fold")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs: bool = True):
        p.add_argument("--config", required=True, type=Path, help="experiment JSON file")
        p.add_argument("--out", type=Path, help="output directory (default: from the config)")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel (position, fold) workers")

    common(sub.add_parser("generate", help="write the synthetic dataset to disk"), jobs=False)
    common(sub.add_parser("run", help="run the protocol for the configured runs"))
    common(sub.add_parser("ablate", help="run the ablation matrix plus the softmax baseline"))
    rep = sub.add_parser("report", help="re-render plots from an existing run directory")
    rep.add_argument("run_dir", type=Path)
    rep.add_argument("--out", type=Path, help="SVG path (default: <run_dir>/roc.svg)")
    return parser


def _fail(exc: BaseException, code: int, kind: str | None = None) -> int:
    err = {"error": kind or type(exc).__name__, "exit_code": code, "message": str(exc)}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            cmd_report(args.run_dir, args.out)
            return 0
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = load_config(args.config, args.seed)
        if args.command == "generate":
            cmd_generate(cfg, args.out, args.force)
        elif args.command == "run":
            cmd_run(cfg, args.out, args.force, args.jobs)
        else:
            cmd_ablate(cfg, args.out, args.force, args.jobs)
    except SNMError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 3, "IOError")
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        return _fail(exc, 4, f"Internal{type(exc).__name__}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
