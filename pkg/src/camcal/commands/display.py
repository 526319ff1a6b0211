"""Display formatting utilities for camcal."""

from typing import List, Optional, Sequence

from ..core.data import LongTailedDataset
from ..core.evaluation import MagnitudeReport, SplitReport
from ..core.training import EpochRecord, GSweepReport, HeadComparisonRow, RunOutcome

SPLIT_COLUMNS = ("top1_all", "top1_many", "top1_medium", "top1_low")


def format_percent(value: Optional[float]) -> str:
    """Accuracy with two decimals, or '-' for an absent split."""
    return "-" if value is None else f"{value:.2f}"


def format_counts(dataset: LongTailedDataset) -> str:
    """Per-class counts and split tags of a training set.

    Args:
        dataset: Dataset to describe

    Returns:
        One line per class plus a summary line
    """
    lines = []
    for c, (count, split) in enumerate(zip(dataset.class_counts, dataset.split_of)):
        lines.append(f"{c:>4} {dataset.class_names[c]:<22} {int(count):>6}  {split.value}")
    counts = dataset.class_counts
    lines.append(
        f"{len(dataset)} images, {dataset.num_classes} classes, "
        f"max {int(counts.max())} / min {int(counts.min())}"
    )
    return "\n".join(lines)


def format_report(report: SplitReport, title: Optional[str] = None) -> str:
    """One-line split summary."""
    parts = [f"{title}:"] if title else []
    parts.append(f"all {format_percent(report.top1_all)}")
    parts.append(f"many {format_percent(report.top1_many)}")
    parts.append(f"medium {format_percent(report.top1_medium)}")
    parts.append(f"low {format_percent(report.top1_low)}")
    return "  ".join(parts)


def format_epoch(record: EpochRecord) -> str:
    line = f"[{record.stage}] epoch {record.epoch:>3}  lr {record.lr:.5f}  loss {record.loss:.4f}"
    if record.val is not None:
        line += "  " + format_report(record.val, "val")
    return line


def format_magnitudes(report: MagnitudeReport, limit: int = 20) -> str:
    lines = [f"spearman(|w_c|, N_c) = {report.spearman:.3f}"]
    for row in report.rows[:limit]:
        lines.append(f"  class {row.class_index:>4}  N={row.count:>6}  |w|={row.magnitude:.4f}")
    if len(report.rows) > limit:
        lines.append(f"  ... {len(report.rows) - limit} more")
    return "\n".join(lines)


def format_sweep(sweep: GSweepReport) -> str:
    lines = []
    for run in sweep.runs:
        if not run.ok:
            lines.append(f"g={run.key:<10g} failed: {run.error}")
        elif run.report is not None:
            lines.append(format_report(run.report, f"g={run.key:g}"))
        else:
            lines.append(f"g={run.key:<10g} (no validation set)")
    best = sweep.best
    if best is not None:
        lines.append(f"best g = {best.key:g}")
    return "\n".join(lines)


def format_outcomes(outcomes: Sequence[RunOutcome], name: str) -> str:
    lines = []
    for run in outcomes:
        if run.ok and run.report is not None:
            lines.append(format_report(run.report, f"{name}={run.key:g}"))
        else:
            lines.append(f"{name}={run.key:g} failed: {run.error}")
    return "\n".join(lines)


def format_head_table(rows: List[HeadComparisonRow]) -> str:
    """Overall accuracy per head under each protocol."""
    lines = [f"{'head':<24}{'stage-1':>10}{'cRT':>10}{'NCM':>10}"]
    for row in rows:
        if row.error:
            lines.append(f"{row.label:<24}failed: {row.error}")
            continue
        cells = [
            format_percent(r.top1_all) if r is not None else "-"
            for r in (row.representation, row.crt, row.ncm)
        ]
        lines.append(f"{row.label:<24}" + "".join(f"{c:>10}" for c in cells))
    return "\n".join(lines)
