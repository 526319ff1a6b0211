"""Config CLI commands for camcal."""

import click

from ..core.config import get_data_dir, get_thread_cap
from .options import config_options, reported_errors, resolve_config


@click.group("config")
def config():
    """Inspect run configuration."""
    pass


@config.command("show")
@config_options
def show(config_path, output_dir, **options):
    """Print the merged config (defaults < --config file < flags) as JSON."""
    run_config = resolve_config(config_path, output_dir, options)
    click.echo(run_config.to_json())


@config.command("env")
def env():
    """Show the environment settings in effect."""
    with reported_errors():
        click.echo(f"CAMCAL_DIR      {get_data_dir()}")
        click.echo(f"CAMCAL_THREADS  {get_thread_cap()}")
