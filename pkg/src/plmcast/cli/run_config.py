"""Run-config file loading and CLI flag overrides."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml

from plmcast.core.schemas import RunConfig, parse_run_config
from plmcast.errors import ConfigError
from plmcast.helpers import deep_merge


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a JSON (or YAML) run-config file into a plain dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: {e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object, got {type(data).__name__}"])
    return data


def flag_overrides(
    *,
    dataset: str | None = None,
    horizons: list[int] | None = None,
    seed: int | None = None,
    out: Path | None = None,
    few_shot: float | None = None,
    input_length: int | None = None,
    descriptions: Path | None = None,
) -> dict[str, Any]:
    """Nested overrides for the flags that were actually given.

    ``--dataset`` takes ``synthetic`` or a CSV path; a path sets the dataset
    name from the file stem so the catalog can supply split and domain.
    """
    overrides: dict[str, Any] = {}
    data: dict[str, Any] = {}
    if dataset is not None:
        if dataset.lower() == "synthetic":
            data |= {"name": "synthetic", "source": "synthetic", "path": None}
        else:
            path = Path(dataset)
            data |= {"name": path.stem, "source": "csv", "path": str(path)}
    if horizons:
        data["horizons"] = list(horizons)
    if few_shot is not None:
        data["few_shot"] = few_shot
    if input_length is not None:
        data["input_length"] = input_length
    if data:
        overrides["data"] = data
    if seed is not None:
        overrides["train"] = {"seed": seed}
    if descriptions is not None:
        overrides["text"] = {"descriptions": str(descriptions)}
    if out is not None:
        overrides["output_dir"] = str(out)
    return overrides


def load_run_config(path: Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Flag > file > default. Every conflict is reported at once as a ConfigError."""
    data = read_config_file(path) if path is not None else {}
    return parse_run_config(deep_merge(data, overrides or {}))
