"""Combine per-run metric reports into comparison tables, bar charts and a summary.

Outputs (all under one directory):

    table1.csv                 model,fid,ms_ssim            the four configurations
    table2.csv                 λ-switch ablation per model family
    table3.csv                 every report, including reference rows
    per_class_comparison.csv   model,class_id,fid,ms_ssim,mean_kp_err
    <metric>_per_class.png     grouped bar chart, one metric per file
    summary.md                 the tables above as markdown
"""

import csv
import logging
import math
from collections.abc import Iterable
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from posekey.config import MODEL_KINDS  # noqa: E402
from posekey.errors import ArgumentError  # noqa: E402
from posekey.evaluation import MetricReport, format_float  # noqa: E402

logger = logging.getLogger(__name__)

FAMILIES = ("cgan", "cdiff")
ABLATION_CELLS = ("kp-only", "pose-only", "both", "neither")
PLOTTED_METRICS = {
    "fid": "FID (lower is better)",
    "ms_ssim": "MS-SSIM (higher is better)",
    "mean_kp_err": "mean keypoint error, px (lower is better)",
}
TABLE1_COLUMNS = ("model", "fid", "ms_ssim")
TABLE2_COLUMNS = ("family", "cell", "lambda_kp", "lambda_pose", "model",
                  "fid", "ms_ssim", "mean_kp_err")
TABLE3_COLUMNS = ("model", "model_kind", "fid", "ms_ssim", "mean_kp_err", "kp_missing")
PER_CLASS_COLUMNS = ("model", "class_id", "fid", "ms_ssim", "mean_kp_err")


def ablation_cell(lambda_kp: float, lambda_pose: float) -> str:
    if lambda_kp and lambda_pose:
        return "both"
    if lambda_kp:
        return "kp-only"
    if lambda_pose:
        return "pose-only"
    return "neither"


def _kind_rank(report: MetricReport) -> int:
    try:
        return MODEL_KINDS.index(report.model_kind)
    except ValueError:
        return len(MODEL_KINDS)


def _ordered(reports: Iterable[MetricReport]) -> list[MetricReport]:
    return sorted(reports, key=lambda r: (_kind_rank(r), r.label))


# ---------------------------------------------------------------------------
# Row builders
# ---------------------------------------------------------------------------

def table1_rows(reports: list[MetricReport]) -> list[list[str]]:
    """Baselines plus pose kinds trained with both auxiliary losses, in kind order."""
    rows = []
    for r in _ordered(reports):
        if r.model_kind not in MODEL_KINDS:
            continue
        if r.model_kind.endswith("_pose") and ablation_cell(r.lambda_kp, r.lambda_pose) != "both":
            continue
        rows.append([r.label, format_float(r.fid), format_float(r.ms_ssim)])
    return rows


def table2_rows(reports: list[MetricReport]) -> list[list[str]]:
    keyed = []
    for r in reports:
        if r.family not in FAMILIES:
            continue
        cell = ablation_cell(r.lambda_kp, r.lambda_pose)
        keyed.append(((FAMILIES.index(r.family), ABLATION_CELLS.index(cell), r.label), [
            r.family, cell, format_float(r.lambda_kp), format_float(r.lambda_pose), r.label,
            format_float(r.fid), format_float(r.ms_ssim), format_float(r.mean_kp_err),
        ]))
    return [row for _, row in sorted(keyed)]


def table3_rows(reports: list[MetricReport]) -> list[list[str]]:
    return [[r.label, r.model_kind, format_float(r.fid), format_float(r.ms_ssim),
             format_float(r.mean_kp_err), str(r.kp_missing)] for r in _ordered(reports)]


def per_class_rows(reports: list[MetricReport]) -> list[list[str]]:
    return [[r.label, str(c.class_id), format_float(c.fid), format_float(c.ms_ssim),
             format_float(c.mean_kp_err)]
            for r in _ordered(reports) for c in r.per_class]


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _write_csv(path: Path, columns: tuple[str, ...], rows: list[list[str]]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def plot_per_class(reports: list[MetricReport], metric: str, path: Path) -> Path:
    """Grouped bars: one group per class, one bar per model."""
    ordered = _ordered(reports)
    classes = sorted({c.class_id for r in ordered for c in r.per_class})
    width = 0.8 / max(len(ordered), 1)
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(classes) * max(len(ordered), 1)), 4.0))
    for i, report in enumerate(ordered):
        values = {c.class_id: getattr(c, metric) for c in report.per_class}
        heights = [values.get(c, math.nan) for c in classes]
        ax.bar(x + (i - (len(ordered) - 1) / 2) * width, heights, width, label=report.label)
    ax.set_xticks(x, [str(c) for c in classes])
    ax.set_xlabel("keyposture class")
    ax.set_ylabel(PLOTTED_METRICS[metric])
    ax.legend(fontsize="small")
    fig.tight_layout()
    # fixed metadata keeps re-emitted PNGs byte-stable
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _markdown_table(columns: tuple[str, ...], rows: list[list[str]]) -> str:
    if not rows:
        return "_no rows_\n"
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def format_summary(reports: list[MetricReport]) -> str:
    parts = ["# posekey evaluation summary", ""]
    for title, columns, rows in (
        ("Pose estimation modules", TABLE1_COLUMNS, table1_rows(reports)),
        ("Auxiliary-loss ablation", TABLE2_COLUMNS, table2_rows(reports)),
        ("All evaluated models", TABLE3_COLUMNS, table3_rows(reports)),
    ):
        parts += [f"## {title}", "", _markdown_table(columns, rows)]

    notes = sorted({note for r in reports
                    for key in ("small_sample_caveat", "ms_ssim_pairing")
                    if (note := r.metadata.get(key))})
    if notes:
        parts += ["## Protocol notes", ""] + [f"- {n}" for n in notes] + [""]
    return "\n".join(parts)


def emit_report(reports: list[MetricReport], out_dir: str | Path) -> list[Path]:
    """Write every combined table, plot and the summary; returns the written paths."""
    if not reports:
        raise ArgumentError("no metric reports to combine")
    labels = [r.label for r in reports]
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise ArgumentError(f"duplicate report label(s): {', '.join(duplicates)}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        _write_csv(out_dir / "table1.csv", TABLE1_COLUMNS, table1_rows(reports)),
        _write_csv(out_dir / "table2.csv", TABLE2_COLUMNS, table2_rows(reports)),
        _write_csv(out_dir / "table3.csv", TABLE3_COLUMNS, table3_rows(reports)),
        _write_csv(out_dir / "per_class_comparison.csv", PER_CLASS_COLUMNS,
                   per_class_rows(reports)),
    ]
    for metric in PLOTTED_METRICS:
        written.append(plot_per_class(reports, metric, out_dir / f"{metric}_per_class.png"))
    summary = out_dir / "summary.md"
    summary.write_text(format_summary(reports))
    written.append(summary)
    logger.info("wrote %d report files to %s", len(written), out_dir)
    return written
