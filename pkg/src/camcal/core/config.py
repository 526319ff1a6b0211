"""Environment settings, logging setup and run-config loading for camcal."""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from .models import InvalidArgumentError, RunConfig

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_data_dir() -> Path:
    """Get the default output root, creating it if needed."""
    env_dir = os.environ.get("CAMCAL_DIR")
    if env_dir:
        data_dir = Path(env_dir)
    else:
        data_dir = Path.home() / ".local" / "share" / "camcal"
    data_dir.mkdir(parents=True, exist_ok=True)
    return data_dir


def get_thread_cap() -> int:
    """Worker cap from CAMCAL_THREADS (default 1)."""
    raw = os.environ.get("CAMCAL_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"CAMCAL_THREADS must be an integer, got {raw!r}")
    return max(1, value)


def resolve_jobs(requested: Optional[int]) -> int:
    """Number of workers to use: the request, capped by CAMCAL_THREADS."""
    cap = get_thread_cap()
    if requested is None:
        return cap
    return max(1, min(requested, cap))


def configure_logging(verbose: bool = False) -> None:
    """Configure the root logger once for command-line use."""
    level_name = "INFO" if verbose else os.environ.get("CAMCAL_LOG_LEVEL", "WARNING")
    level = getattr(logging, level_name.upper(), logging.WARNING)
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level, format=LOG_FORMAT)
    root.setLevel(level)


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
) -> RunConfig:
    """Load a RunConfig from JSON and apply flag overrides (flags win).

    Args:
        path: Optional JSON config file
        overrides: Section -> field -> value; None values are ignored

    Raises:
        InvalidArgumentError: On unknown keys or invalid values, naming each field
        OSError: If the config file cannot be read
    """
    if path is not None:
        config = RunConfig.from_json(Path(path).read_text(encoding="utf-8"))
    else:
        config = RunConfig()

    data = config.to_dict()
    for section, values in (overrides or {}).items():
        for name, value in values.items():
            if value is None:
                continue
            if section == "output_dir":
                data["output_dir"] = value
            else:
                data[section][name] = value
    config = RunConfig.from_dict(data)
    if config.dataset.seed is None:
        config.dataset.seed = config.train.seed
    config.validate()
    return config
