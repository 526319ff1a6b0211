"""Shared command options, config loading and error translation."""

import typing
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional

import click

from ..core.config import get_data_dir, load_run_config
from ..core.models import (
    FIELD_HELP,
    CamcVariant,
    DatasetSpec,
    DataSource,
    EvalOptions,
    FormatError,
    HeadKind,
    InvalidArgumentError,
    NumericalError,
    RunConfig,
    SamplerKind,
    Stage,
    TrainConfig,
    decode_float,
)

SECTIONS = {"train": TrainConfig, "dataset": DatasetSpec, "eval": EvalOptions}
CHOICES = {
    ("train", "stage"): [s.value for s in Stage],
    ("train", "head"): [k.value for k in HeadKind],
    ("train", "sampler"): [k.value for k in SamplerKind],
    ("train", "camc_variant"): [v.value for v in CamcVariant],
    ("dataset", "source"): [s.value for s in DataSource],
}
# Flags that would collide with a train field carry their section as prefix.
RENAMED = {("dataset", "seed"): "dataset-seed"}


class ConfigError(click.ClickException):
    """Invalid configuration or arguments."""
    exit_code = 2


class IOFailure(click.ClickException):
    """A file could not be read, written or parsed."""
    exit_code = 3


class NumericalAbort(click.ClickException):
    """Training stopped on a non-finite value."""
    exit_code = 4


@contextmanager
def reported_errors() -> Iterator[None]:
    """Turn core exceptions into click exceptions with the documented exit codes."""
    try:
        yield
    except NumericalError as e:
        raise NumericalAbort(str(e))
    except FormatError as e:
        raise IOFailure(str(e))
    except InvalidArgumentError as e:
        raise ConfigError(str(e))
    except OSError as e:
        raise IOFailure(str(e))


def option_flag(section: str, name: str) -> str:
    return "--" + RENAMED.get((section, name), name.replace("_", "-"))


def option_dest(section: str, name: str) -> str:
    return f"{section}__{name}"


def _parse_channels(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def _parse_float(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    try:
        return decode_float(value)
    except ValueError:
        raise click.BadParameter(f"expected a number or 'inf', got {value!r}")


def _base_type(annotation: Any) -> Any:
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    return args[0] if typing.get_origin(annotation) is typing.Union and args else annotation


def _make_option(section: str, name: str, annotation: Any) -> Callable:
    help_text = FIELD_HELP[section][name]
    dest = option_dest(section, name)
    flag = option_flag(section, name)
    base = _base_type(annotation)
    if base is bool:
        negative = "--no-" + flag[2:]
        return click.option(f"{flag}/{negative}", dest, default=None, help=help_text)
    if (section, name) in CHOICES:
        return click.option(flag, dest, type=click.Choice(CHOICES[(section, name)]), help=help_text)
    if name == "channels":
        return click.option(flag, dest, callback=lambda ctx, p, v: _parse_channels(v), help=help_text)
    if name == "tau":
        return click.option(flag, dest, callback=lambda ctx, p, v: _parse_float(v), help=help_text)
    click_type = {int: int, float: float}.get(base, str)
    return click.option(flag, dest, type=click_type, default=None, help=help_text)


def config_options(func: Callable) -> Callable:
    """Add --config, --output-dir and one flag per config field (see FIELD_HELP)."""
    for section in reversed(list(SECTIONS)):
        for f in reversed(fields(SECTIONS[section])):
            func = _make_option(section, f.name, f.type)(func)
    func = click.option(
        "--output-dir", "-o", type=click.Path(file_okay=False), help="Directory for all outputs"
    )(func)
    func = click.option(
        "--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config"
    )(func)
    return func


def resolve_config(
    config_path: Optional[str],
    output_dir: Optional[str],
    options: Dict[str, Any],
    stage: Optional[Stage] = None,
) -> RunConfig:
    """Merge defaults, the JSON file and flags (flags win)."""
    overrides: Dict[str, Dict[str, Any]] = {section: {} for section in SECTIONS}
    for key, value in options.items():
        section, _, name = key.partition("__")
        if section in overrides:
            overrides[section][name] = value
    if stage is not None:
        overrides["train"]["stage"] = stage.value
    overrides["output_dir"] = {"output_dir": output_dir}
    with reported_errors():
        return load_run_config(Path(config_path) if config_path else None, overrides)


def output_root(config: RunConfig) -> Path:
    """The run's output directory, created on demand."""
    if config.output_dir:
        root = Path(config.output_dir)
    else:
        root = get_data_dir() / "runs" / "latest"
    with reported_errors():
        root.mkdir(parents=True, exist_ok=True)
    return root
