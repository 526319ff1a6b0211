"""Dataset CLI commands for camcal."""

import logging

import click

from ..core.data import DataSplits, build_datasets, build_train_set, save_dataset
from ..core.models import RunConfig
from ..utils.export import write_json
from .display import format_counts
from .options import config_options, output_root, reported_errors, resolve_config

logger = logging.getLogger(__name__)


def experiment_splits(config: RunConfig) -> DataSplits:
    """Train/val/test sets of a run, split by the run's thresholds."""
    with reported_errors():
        return build_datasets(config.dataset, config.eval.many_threshold, config.eval.few_threshold)


@click.command("make-dataset")
@config_options
def make_dataset(config_path, output_dir, **options):
    """Build a long-tailed training set and write it to <output>/dataset."""
    config = resolve_config(config_path, output_dir, options)
    root = output_root(config)
    with reported_errors():
        dataset = build_train_set(config.dataset).with_thresholds(
            config.eval.many_threshold, config.eval.few_threshold
        )
        directory = save_dataset(dataset, root / "dataset")
        write_json(config.to_dict(), root / "config.json")
    logger.info("dataset=%s images=%d classes=%d", directory, len(dataset), dataset.num_classes)
    click.echo(format_counts(dataset))
    click.echo(f"Dataset written to {directory}")
