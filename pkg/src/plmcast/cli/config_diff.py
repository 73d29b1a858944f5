"""Which config keys a variant or a flag set changes relative to a base config."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from plmcast.core.schemas import RunConfig

# Keys that differ between runs without changing what is trained.
IGNORED_KEYS = frozenset({"output_dir"})


@dataclass
class ConfigChange:
    key: str
    action: str  # "add" | "change" | "remove"
    before: Any
    after: Any


@dataclass
class ConfigDiff:
    added: list[ConfigChange] = field(default_factory=list)
    changed: list[ConfigChange] = field(default_factory=list)
    removed: list[ConfigChange] = field(default_factory=list)

    @property
    def has_changes(self) -> bool:
        return bool(self.added or self.changed or self.removed)

    def entries(self) -> list[ConfigChange]:
        return [*self.added, *self.changed, *self.removed]


def _flatten(data: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            flat |= _flatten(value, f"{name}.")
        else:
            flat[name] = value
    return flat


def compute_diff(base: RunConfig, other: RunConfig) -> ConfigDiff:
    """Compare two configs key by key on their dotted, JSON-mode dumps."""
    before = _flatten(base.model_dump(mode="json"))
    after = _flatten(other.model_dump(mode="json"))
    diff = ConfigDiff()
    for key in sorted(set(before) | set(after)):
        if key in IGNORED_KEYS:
            continue
        if key not in before:
            diff.added.append(ConfigChange(key, "add", None, after[key]))
        elif key not in after:
            diff.removed.append(ConfigChange(key, "remove", before[key], None))
        elif before[key] != after[key]:
            diff.changed.append(ConfigChange(key, "change", before[key], after[key]))
    return diff


def format_changes(diff: ConfigDiff) -> list[str]:
    lines: list[str] = []
    for entry in diff.added:
        lines.append(f"+ {entry.key}: {entry.after!r}")
    for entry in diff.changed:
        lines.append(f"~ {entry.key}: {entry.before!r} -> {entry.after!r}")
    for entry in diff.removed:
        lines.append(f"- {entry.key}: {entry.before!r}")
    return lines


def format_diff(diff: ConfigDiff) -> str:
    """Human-readable diff, one key per line."""
    if not diff.has_changes:
        return "No changes detected."
    return "\n".join(f"  {line}" for line in format_changes(diff))
