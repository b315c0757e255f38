"""Report files: per-fold metric CSV, per-sample score CSV, aggregate JSON, SVG ROC."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from snmnet.errors import LoadError
from snmnet.evaluation.metrics import auroc, roc_curve
from snmnet.evaluation.protocol import ExperimentReport

METRIC_COLUMNS = ("position", "fold", "config", "accuracy", "tpr", "auroc", "tau", "best_epoch",
                  "n_train", "n_known_test", "n_unknown_test", "known_classes", "unknown_classes")
SCORE_COLUMNS = ("position", "fold", "config", "truth", "score")


def _num(x: float) -> str:
    return repr(float(x))


def _classes(ids) -> str:
    return " ".join(str(c) for c in ids)


def write_metrics_csv(report: ExperimentReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in report.rows:
            w.writerow([report.position_names[r.position], r.fold, r.config, _num(r.accuracy),
                        _num(r.tpr), _num(r.auroc), _num(r.tau), r.best_epoch, r.n_train,
                        r.n_known_test, r.n_unknown_test, _classes(r.known_classes),
                        _classes(r.unknown_classes)])
    return path


def write_scores_csv(report: ExperimentReport, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in report.rows:
            pos = report.position_names[r.position]
            for truth, scores in (("known", r.known_scores), ("unknown", r.unknown_scores)):
                for s in scores:
                    w.writerow([pos, r.fold, r.config, truth, _num(s)])
    return path


def write_summary_json(report: ExperimentReport, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    doc = {"seed": report.seed, "configs": report.configs, "positions": report.position_names,
           "n_rows": len(report.rows), "summary": report.summary()}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_scores_csv(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Pooled (known, unknown) scores per config, in first-seen config order."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"score file not found: {path}")
    pooled: dict[str, dict[str, list[float]]] = defaultdict(lambda: {"known": [], "unknown": []})
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(SCORE_COLUMNS) - set(reader.fieldnames):
            raise LoadError(f"{path}: expected columns {', '.join(SCORE_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if row["truth"] not in ("known", "unknown"):
                raise LoadError(f"{path}:{line_no}: truth must be 'known' or 'unknown'")
            try:
                pooled[row["config"]][row["truth"]].append(float(row["score"]))
            except ValueError:
                raise LoadError(f"{path}:{line_no}: score {row['score']!r} is not a number") from None
    return {c: (np.array(v["known"]), np.array(v["unknown"])) for c, v in pooled.items()}


def pooled_scores(report: ExperimentReport) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for c in report.configs:
        rows = report.for_config(c)
        out[c] = (np.concatenate([r.known_scores for r in rows]),
                  np.concatenate([r.unknown_scores for r in rows]))
    return out


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def roc_svg(curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "ROC (pooled over folds)",
            size: int = 420) -> str:
    """Render pooled ROC curves as a standalone SVG document.

    ``curves`` maps a label to (known_scores, unknown_scores). Scores are
    pooled across folds, which mixes per-fold score scales; per-fold AUROC in
    the metric CSV is the number to quote.
    """
    pad, plot = 50, size - 80
    x0, y0 = pad, pad + plot

    def pt(fx, ty):
        return f"{x0 + fx * plot:.2f},{y0 - ty * plot:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(curves)}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect x="{x0}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="#000"/>',
        f'<polyline points="{pt(0, 0)} {pt(1, 1)}" fill="none" stroke="#bbb" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2}" y="{pad - 18}" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{size / 2}" y="{y0 + 32}" text-anchor="middle">false positive rate</text>',
        f'<text x="14" y="{pad + plot / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {pad + plot / 2})">true positive rate</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{x0 + v * plot:.2f}" y="{y0 + 14}" text-anchor="middle">{v:g}</text>')
        parts.append(f'<text x="{x0 - 6}" y="{y0 - v * plot + 4:.2f}" text-anchor="end">{v:g}</text>')
    for i, (name, (known, unknown)) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        fpr, tpr = roc_curve(known, unknown)
        points = " ".join(pt(f, t) for f, t in zip(fpr, tpr))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = size + 20 * i - 4
        parts.append(f'<line x1="{x0}" y1="{ly - 4}" x2="{x0 + 20}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 26}" y="{ly}">{escape(name)} '
                     f'(pooled AUROC {auroc(known, unknown):.4f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_roc_svg(curves, path: str | Path, title: str = "ROC (pooled over folds)") -> Path:
    path = Path(path)
    path.write_text(roc_svg(curves, title))
    return path


def format_table(report: ExperimentReport) -> str:
    """Plain-text mean ± std table, one row per config."""
    head = f"{'config':<10} {'accuracy':>17} {'TPR@FPR':>17} {'AUROC':>17} {'pos. std AUROC':>15}"
    lines = [head, "-" * len(head)]
    for c in report.configs:
        cells = []
        for m in ("accuracy", "tpr", "auroc"):
            mean, std, _ = report.aggregate(c, m)
            cells.append(f"{mean:.4f} ± {std:.4f}" if std is not None else f"{mean:.4f}")
        spread = report.position_spread(c, "auroc")
        spread_s = f"{spread:.4f}" if spread is not None else "n/a"
        lines.append(f"{c:<10} {cells[0]:>17} {cells[1]:>17} {cells[2]:>17} {spread_s:>15}")
    return "\n".join(lines)
