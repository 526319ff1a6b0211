"""Main CLI for camcal."""

import click

from . import __version__
from .core.config import configure_logging
from .commands.config import config
from .commands.dataset import make_dataset
from .commands.evaluate import cam_dump, eval_command
from .commands.train import compare_heads_command, retrain, sweep_g_command, sweep_tau_command, train


@click.group(invoke_without_command=True)
@click.option("--version", is_flag=True, help="Show version")
@click.option("--verbose", "-v", is_flag=True, help="Log training progress at INFO level")
@click.pass_context
def cli(ctx, version, verbose):
    """camcal - long-tailed classification with CAM calibration.

    Build a long-tailed dataset, train the representation (stage 1), re-train
    the classifier with optional calibration (stage 2) and evaluate per split.
    """
    configure_logging(verbose)

    if version:
        click.echo(f"camcal v{__version__}")
        return

    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


cli.add_command(make_dataset)
cli.add_command(train)
cli.add_command(retrain)
cli.add_command(eval_command)
cli.add_command(sweep_g_command)
cli.add_command(sweep_tau_command)
cli.add_command(compare_heads_command)
cli.add_command(cam_dump)
cli.add_command(config)


def main():
    """Entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
