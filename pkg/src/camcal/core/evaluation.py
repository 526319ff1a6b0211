"""Top-1 reports per split, weight-magnitude diagnostics and group gains."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .config import resolve_jobs
from .data import FEW_THRESHOLD, MANY_THRESHOLD, LongTailedDataset, split_tags
from .models import InvalidArgumentError, Split
from .network import ClassifierHead
from .pipeline import Model

logger = logging.getLogger(__name__)


def _percent(correct: float, total: float) -> Optional[float]:
    return None if total == 0 else 100.0 * float(correct) / float(total)


@dataclass
class SplitReport:
    """Accuracies in percent; a split with no test items is None rather than 0."""
    top1_many: Optional[float]
    top1_medium: Optional[float]
    top1_low: Optional[float]
    top1_all: Optional[float]
    per_class_acc: np.ndarray
    confusion: np.ndarray
    splits: List[Split] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "top1_many": self.top1_many,
            "top1_medium": self.top1_medium,
            "top1_low": self.top1_low,
            "top1_all": self.top1_all,
            "per_class_acc": [None if math.isnan(a) else float(a) for a in self.per_class_acc],
            "splits": [s.value for s in self.splits],
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return confusion


def report_from_confusion(
    confusion: np.ndarray,
    class_counts: Sequence[int],
    many: int = MANY_THRESHOLD,
    few: int = FEW_THRESHOLD,
    class_averaged: bool = False,
) -> SplitReport:
    """Every accuracy of a report derived from the confusion matrix alone.

    Split membership comes from the training counts. Splits are instance-averaged
    unless class_averaged; the overall figure is always correct/total.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    if len(class_counts) != confusion.shape[0]:
        raise InvalidArgumentError(
            f"{len(class_counts)} class counts for a {confusion.shape[0]}-class confusion matrix"
        )
    correct = np.diag(confusion).astype(np.float64)
    totals = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, 100.0 * correct / np.maximum(totals, 1), np.nan)
    splits = split_tags(class_counts, many, few)

    def split_value(split: Split) -> Optional[float]:
        members = np.array([s is split for s in splits], dtype=bool)
        if class_averaged:
            present = members & (totals > 0)
            return float(per_class[present].mean()) if present.any() else None
        return _percent(correct[members].sum(), totals[members].sum())

    return SplitReport(
        top1_many=split_value(Split.MANY),
        top1_medium=split_value(Split.MEDIUM),
        top1_low=split_value(Split.LOW),
        top1_all=_percent(correct.sum(), totals.sum()),
        per_class_acc=per_class,
        confusion=confusion,
        splits=splits,
    )


def report_from_predictions(
    labels: np.ndarray,
    predictions: np.ndarray,
    class_counts: Sequence[int],
    many: int = MANY_THRESHOLD,
    few: int = FEW_THRESHOLD,
    class_averaged: bool = False,
) -> SplitReport:
    confusion = confusion_matrix(labels, predictions, len(class_counts))
    return report_from_confusion(confusion, class_counts, many, few, class_averaged)


def evaluate(
    model: Model,
    test_set: LongTailedDataset,
    class_counts: Sequence[int],
    many: int = MANY_THRESHOLD,
    few: int = FEW_THRESHOLD,
    class_averaged: bool = False,
    jobs: Optional[int] = None,
    batch_size: int = 256,
) -> SplitReport:
    """Top-1 report of a model on a test set, split by the training class counts.

    The test set may be sharded across workers; shard confusion matrices are
    summed, so the result does not depend on the shard count.

    Raises:
        InvalidArgumentError: If test labels fall outside the model's classes
    """
    num_classes = len(class_counts)
    if model.num_classes != num_classes:
        raise InvalidArgumentError(
            f"model scores {model.num_classes} classes, counts describe {num_classes}"
        )
    if len(test_set) and test_set.labels.max() >= num_classes:
        raise InvalidArgumentError("test labels fall outside [0, N)")

    workers = resolve_jobs(jobs)
    shards = [s for s in np.array_split(np.arange(len(test_set)), workers) if len(s)]

    def shard_confusion(indices: np.ndarray) -> np.ndarray:
        predictions = model.predict(np.asarray(test_set.images[indices]), batch_size)
        return confusion_matrix(test_set.labels[indices], predictions, num_classes)

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(shard_confusion, shards):
                confusion += part
    else:
        for shard in shards:
            confusion += shard_confusion(shard)
    return report_from_confusion(confusion, class_counts, many, few, class_averaged)


def tail_to_head_mass(report: SplitReport) -> Optional[float]:
    """Share of low-shot test items predicted as a many-shot class."""
    tail = [c for c, s in enumerate(report.splits) if s is Split.LOW]
    head = [c for c, s in enumerate(report.splits) if s is Split.MANY]
    total = report.confusion[tail].sum() if tail else 0
    if total == 0:
        return None
    return float(report.confusion[np.ix_(tail, head)].sum()) / float(total)


# Weight magnitudes


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties; 0 when either side is all tied."""
    ranks_a = rankdata(np.asarray(a, dtype=np.float64))
    ranks_b = rankdata(np.asarray(b, dtype=np.float64))
    if len(ranks_a) < 2 or np.ptp(ranks_a) == 0 or np.ptp(ranks_b) == 0:
        return 0.0
    da = ranks_a - ranks_a.mean()
    db = ranks_b - ranks_b.mean()
    return float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum()))


@dataclass
class MagnitudeRow:
    class_index: int
    count: int
    magnitude: float


@dataclass
class MagnitudeReport:
    """Classes by training count (descending) with their weight norms."""
    rows: List[MagnitudeRow]
    spearman: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "spearman": self.spearman,
            "rows": [
                {"class": r.class_index, "count": r.count, "magnitude": r.magnitude} for r in self.rows
            ],
        }


def weight_magnitude_report(head: ClassifierHead, class_counts: Sequence[int]) -> MagnitudeReport:
    """||w_c|| of the effective class weights against N_c."""
    counts = np.asarray(class_counts, dtype=np.int64)
    if len(counts) != head.num_classes:
        raise InvalidArgumentError(f"{len(counts)} counts for a {head.num_classes}-class head")
    magnitudes = np.linalg.norm(head.effective_weight().astype(np.float64), axis=1)
    order = np.argsort(-counts, kind="stable")
    rows = [MagnitudeRow(int(c), int(counts[c]), float(magnitudes[c])) for c in order]
    return MagnitudeReport(rows, spearman(counts, magnitudes))


# Group gains


@dataclass
class GroupGainReport:
    """Per-group accuracy change of `report_b` over `baseline`, head groups first."""
    groups: List[List[int]]
    gains: List[float]
    baseline: str = "a"

    def to_dict(self) -> Dict[str, Any]:
        return {"baseline": self.baseline, "groups": self.groups, "gains": self.gains}


def group_gains(
    report_a: SplitReport,
    report_b: SplitReport,
    class_counts: Sequence[int],
    groups: int = 10,
    baseline: str = "a",
) -> GroupGainReport:
    """Mean per-class accuracy of b minus a over count-sorted class groups.

    Raises:
        InvalidArgumentError: On mismatched class sets or more groups than classes
    """
    n = len(class_counts)
    if report_a.num_classes != n or report_b.num_classes != n:
        raise InvalidArgumentError("reports and class counts cover different class sets")
    if not 1 <= groups <= n:
        raise InvalidArgumentError(f"cannot split {n} classes into {groups} groups")
    order = np.argsort(-np.asarray(class_counts), kind="stable")
    partition = np.array_split(order, groups)
    gains = []
    for members in partition:
        delta = report_b.per_class_acc[members] - report_a.per_class_acc[members]
        gains.append(float(np.nanmean(delta)) if np.isfinite(delta).any() else 0.0)
    return GroupGainReport([m.tolist() for m in partition], gains, baseline)
