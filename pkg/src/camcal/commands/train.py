"""Training and sweep CLI commands for camcal."""

import dataclasses
import logging
from pathlib import Path
from typing import List, Optional

import click

from ..core.checkpoint import read_checkpoint, write_checkpoint
from ..core.data import LongTailedDataset
from ..core.models import G_GRID, CamcVariant, Stage, decode_float
from ..core.training import (
    EpochRecord,
    RunOutcome,
    compare_heads,
    sweep_g,
    sweep_tau,
    train_stage1,
    train_stage2,
)
from ..utils.export import MetricsLog, write_csv, write_json
from .dataset import experiment_splits
from .display import SPLIT_COLUMNS, format_epoch, format_head_table, format_outcomes, format_sweep
from .options import (
    ConfigError,
    config_options,
    output_root,
    reported_errors,
    resolve_config,
)

logger = logging.getLogger(__name__)

DEFAULT_TAUS = "0,10,20,50,100,200,inf"


def parse_float_list(value: str, name: str) -> List[float]:
    """Comma-separated numbers; 'inf' is accepted."""
    try:
        values = [decode_float(part.strip()) for part in value.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {value!r}")
    if not values:
        raise ConfigError(f"{name}: needs at least one value")
    return values


def _echo_epoch(log: MetricsLog):
    def on_epoch(record: EpochRecord) -> None:
        log.write(record.to_dict())
        click.echo(format_epoch(record))

    return on_epoch


def _split_row(report) -> List[Optional[float]]:
    return [getattr(report, name) if report is not None else None for name in SPLIT_COLUMNS]


def check_counts(checkpoint_meta: dict, train: LongTailedDataset) -> None:
    """A stage-2 run must see the class counts its stage-1 checkpoint was trained on."""
    expected = checkpoint_meta.get("class_counts")
    if expected is not None and list(expected) != train.class_counts.tolist():
        raise ConfigError(
            "dataset: class counts differ from the ones the checkpoint was trained on"
        )


@click.command("train")
@config_options
def train(config_path, output_dir, **options):
    """Stage 1: train backbone and head jointly, write stage1.ckpt."""
    config = resolve_config(config_path, output_dir, options, stage=Stage.REPRESENTATION)
    root = output_root(config)
    splits = experiment_splits(config)
    with reported_errors():
        write_json(config.to_dict(), root / "config.json")
        log = MetricsLog(root / "metrics_stage1.jsonl")
        result = train_stage1(splits.train, config.train, splits.val, on_epoch=_echo_epoch(log))
        path = write_checkpoint(result.checkpoint, root / "stage1.ckpt")
    click.echo(f"Checkpoint written to {path}")


@click.command("retrain")
@click.option(
    "--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False),
    help="Stage-1 checkpoint",
)
@click.option("--camc", "camc_flag", is_flag=True, help="Shorthand for --camc-variant camc")
@config_options
def retrain(checkpoint_path, camc_flag, config_path, output_dir, **options):
    """Stage 2: re-train the classifier on the frozen backbone, write stage2.ckpt."""
    if camc_flag and options.get("train__camc_variant") is None:
        options["train__camc_variant"] = CamcVariant.CAMC.value
    config = resolve_config(config_path, output_dir, options, stage=Stage.CLASSIFIER)
    root = output_root(config)
    with reported_errors():
        stage1 = read_checkpoint(Path(checkpoint_path))
    splits = experiment_splits(config)
    check_counts(stage1.meta, splits.train)
    with reported_errors():
        write_json(config.to_dict(), root / "config.json")
        log = MetricsLog(root / "metrics_stage2.jsonl")
        result = train_stage2(stage1, splits.train, config.train, splits.val, on_epoch=_echo_epoch(log))
        path = write_checkpoint(result.checkpoint, root / "stage2.ckpt")
    click.echo(f"Checkpoint written to {path}")


@click.command("sweep-g")
@click.option(
    "--g-values", default=",".join(f"{g:g}" for g in G_GRID), show_default=True,
    help="Comma-separated magnitudes g to train stage 1 with",
)
@config_options
def sweep_g_command(g_values, config_path, output_dir, **options):
    """Stage-1 training for each g; writes sweep_g.csv and sweep_g_curves.csv."""
    values = parse_float_list(g_values, "--g-values")
    config = resolve_config(config_path, output_dir, options, stage=Stage.REPRESENTATION)
    root = output_root(config)
    splits = experiment_splits(config)
    with reported_errors():
        sweep = sweep_g(splits.train, values, config.train, splits.val, config.eval.jobs)
        write_csv(
            root / "sweep_g.csv",
            ["g", "final_loss", *SPLIT_COLUMNS, "error"],
            (
                [run.key, run.history[-1].loss if run.history else None, *_split_row(run.report), run.error]
                for run in sweep.runs
            ),
        )
        write_csv(
            root / "sweep_g_curves.csv",
            ["g", "epoch", "lr", "loss", *SPLIT_COLUMNS],
            (
                [run.key, r.epoch, r.lr, r.loss, *_split_row(r.val)]
                for run in sweep.runs
                for r in run.history
            ),
        )
    click.echo(format_sweep(sweep))


def _outcome_rows(outcomes: List[RunOutcome]):
    for run in outcomes:
        key = "inf" if run.key == float("inf") else run.key
        yield [key, *_split_row(run.report), run.error]


@click.command("sweep-tau")
@click.option(
    "--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False),
    help="Stage-1 checkpoint",
)
@click.option("--taus", default=DEFAULT_TAUS, show_default=True, help="Comma-separated thresholds")
@config_options
def sweep_tau_command(checkpoint_path, taus, config_path, output_dir, **options):
    """Stage-2 calibration for each tau; writes sweep_tau.csv with test accuracies."""
    values = parse_float_list(taus, "--taus")
    if options.get("train__camc_variant") is None:
        options["train__camc_variant"] = CamcVariant.CAMC.value
    config = resolve_config(config_path, output_dir, options, stage=Stage.CLASSIFIER)
    root = output_root(config)
    with reported_errors():
        stage1 = read_checkpoint(Path(checkpoint_path))
    splits = experiment_splits(config)
    check_counts(stage1.meta, splits.train)
    with reported_errors():
        outcomes = sweep_tau(stage1, splits.train, values, config.train, splits.test, config.eval.jobs)
        write_csv(root / "sweep_tau.csv", ["tau", *SPLIT_COLUMNS, "error"], _outcome_rows(outcomes))
    click.echo(format_outcomes(outcomes, "tau"))


@click.command("compare-heads")
@click.option("--g-star", default=0.5, show_default=True, type=float, help="Tuned g of the last norm_fc row")
@click.option("--crt-epochs", default=None, type=int, help="Epochs of the re-trained linear classifier")
@config_options
def compare_heads_command(g_star, crt_epochs, config_path, output_dir, **options):
    """Train every stage-1 head; score it directly, after cRT and with NCM."""
    config = resolve_config(config_path, output_dir, options, stage=Stage.REPRESENTATION)
    root = output_root(config)
    splits = experiment_splits(config)
    stage2_config = dataclasses.replace(
        config.train, stage=Stage.CLASSIFIER.value, sampler=None, g=None, epochs=crt_epochs
    )
    with reported_errors():
        rows = compare_heads(
            splits.train, splits.test, config.train, stage2_config, g_star, config.eval.jobs
        )
        write_csv(
            root / "compare_heads.csv",
            ["head", "stage1_top1", "crt_top1", "ncm_top1", "error"],
            (
                [
                    row.label,
                    *[r.top1_all if r is not None else None for r in (row.representation, row.crt, row.ncm)],
                    row.error,
                ]
                for row in rows
            ),
        )
    click.echo(format_head_table(rows))
