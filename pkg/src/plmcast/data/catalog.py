"""Registry of the benchmark datasets and their published split protocol."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import yaml

DEFAULT_SPLIT = (7, 1, 2)


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    domain: str
    frequency: str
    rows: int
    channels: int
    split: tuple[int, int, int]


@lru_cache
def load_catalog() -> dict[str, DatasetInfo]:
    text = resources.files("plmcast.data").joinpath("datasets.yml").read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    return {
        name: DatasetInfo(
            name=name,
            domain=entry["domain"],
            frequency=entry["frequency"],
            rows=int(entry["rows"]),
            channels=int(entry["channels"]),
            split=tuple(entry["split"]),
        )
        for name, entry in data.items()
    }


def lookup(name: str) -> DatasetInfo | None:
    """Case-insensitive lookup; ``None`` for datasets outside the registry."""
    catalog = load_catalog()
    for key, info in catalog.items():
        if key.lower() == name.lower():
            return info
    return None
