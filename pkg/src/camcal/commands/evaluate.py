"""Evaluation and CAM export CLI commands for camcal."""

import logging
from pathlib import Path
from typing import List, Tuple

import click
import numpy as np

from ..core.checkpoint import Checkpoint, model_from_checkpoint, read_checkpoint
from ..core.data import LongTailedDataset
from ..core.evaluation import evaluate, group_gains, tail_to_head_mass, weight_magnitude_report
from ..core.models import Split
from ..core.pipeline import Model
from ..utils.export import export_cam_heatmaps, export_confusion_csv, write_json
from .dataset import experiment_splits
from .display import format_magnitudes, format_report
from .options import IOFailure, config_options, output_root, reported_errors, resolve_config
from .train import check_counts

logger = logging.getLogger(__name__)


def _load_model(path: str) -> Tuple[Checkpoint, Model]:
    with reported_errors():
        checkpoint = read_checkpoint(Path(path))
        return checkpoint, model_from_checkpoint(checkpoint)


@click.command("eval")
@click.option(
    "--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False),
    help="Checkpoint to evaluate",
)
@click.option(
    "--baseline", "baseline_path", type=click.Path(dir_okay=False),
    help="Second checkpoint; adds per-group gains over it to the report",
)
@config_options
def eval_command(checkpoint_path, baseline_path, config_path, output_dir, **options):
    """Top-1 per split on the test set; writes report.json and confusion.csv."""
    config = resolve_config(config_path, output_dir, options)
    root = output_root(config)
    checkpoint, model = _load_model(checkpoint_path)
    splits = experiment_splits(config)
    check_counts(checkpoint.meta, splits.train)
    opts = config.eval
    counts = splits.train.class_counts

    with reported_errors():
        report = evaluate(
            model, splits.test, counts, opts.many_threshold, opts.few_threshold,
            opts.class_averaged, opts.jobs,
        )
        magnitudes = weight_magnitude_report(model.head, counts)
        document = {
            "checkpoint": str(checkpoint_path),
            "stage": checkpoint.stage,
            "seed": checkpoint.seed,
            "class_counts": counts.tolist(),
            "report": report.to_dict(),
            "tail_to_head_mass": tail_to_head_mass(report),
            "weight_magnitudes": magnitudes.to_dict(),
        }
        if baseline_path:
            _, baseline = _load_model(baseline_path)
            base_report = evaluate(
                baseline, splits.test, counts, opts.many_threshold, opts.few_threshold,
                opts.class_averaged, opts.jobs,
            )
            groups = min(opts.groups, len(counts))
            gains = group_gains(base_report, report, counts, groups, baseline=str(baseline_path))
            document["baseline_report"] = base_report.to_dict()
            document["group_gains"] = gains.to_dict()
        write_json(document, root / "report.json")
        export_confusion_csv(report, root / "confusion.csv")

    click.echo(format_report(report, "test"))
    click.echo(format_magnitudes(magnitudes))
    click.echo(f"Report written to {root / 'report.json'}")


def tail_test_indices(model: Model, test: LongTailedDataset, train: LongTailedDataset, count: int) -> List[int]:
    """First `count` test images of calibrated classes, or of low-shot classes without calibration."""
    if model.camc is not None and model.camc.tail_classes:
        tail = set(model.camc.tail_classes)
    else:
        tail = {c for c, split in enumerate(train.split_of) if split is Split.LOW}
    picks = [i for i, label in enumerate(test.labels) if int(label) in tail]
    return picks[:count]


@click.command("cam-dump")
@click.option(
    "--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False),
    help="Stage-2 checkpoint",
)
@click.option("--count", default=5, show_default=True, type=int, help="Tail test images to dump")
@click.option("--overlay", is_flag=True, help="Also write .ppm overlays of each heatmap")
@config_options
def cam_dump(checkpoint_path, count, overlay, config_path, output_dir, **options):
    """Write vanilla and calibrated CAM heatmaps of tail test images to <output>/cams."""
    config = resolve_config(config_path, output_dir, options)
    root = output_root(config)
    checkpoint, model = _load_model(checkpoint_path)
    splits = experiment_splits(config)
    check_counts(checkpoint.meta, splits.train)
    indices = tail_test_indices(model, splits.test, splits.train, count)
    if not indices:
        click.echo("No tail-class test images to dump.")
        return
    try:
        with reported_errors():
            written = export_cam_heatmaps(
                model,
                np.asarray(splits.test.images[indices]),
                indices,
                [int(splits.test.labels[i]) for i in indices],
                root / "cams",
                overlay=overlay,
            )
    except ImportError as e:
        raise IOFailure(str(e))
    click.echo(f"{len(written)} files written to {root / 'cams'}")
