"""Benchmark table ingestion, chronological splits, sliding windows and instance normalization."""

from __future__ import annotations

import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd
import structlog
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.preprocessing import StandardScaler

from plmcast.core.models import FewShotMode, MissingPolicy
from plmcast.errors import IngestionError, SplitError, WindowError

logger = structlog.get_logger()

STD_FLOOR = 1e-5
TIMESTAMP_COLUMN = "date"
_MISSING_TOKENS = frozenset({"", "nan", "NaN", "NA", "null"})


@dataclass(frozen=True, eq=False)
class RawSeries:
    """A multichannel table: rows are time steps, columns are channels."""

    values: np.ndarray
    channel_names: tuple[str, ...]
    timestamps: tuple[str, ...]
    frequency: str = ""

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise IngestionError(f"Series values must be 2-D, got shape {values.shape}")
        if values.shape[1] < 1:
            raise IngestionError("Series needs at least one channel")
        if values.shape[1] != len(self.channel_names):
            raise IngestionError(
                f"{values.shape[1]} value columns but {len(self.channel_names)} channel names"
            )
        if values.shape[0] != len(self.timestamps):
            raise IngestionError(
                f"{values.shape[0]} rows but {len(self.timestamps)} timestamps"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> RawSeries:
        return replace(
            self, values=self.values[start:stop], timestamps=self.timestamps[start:stop]
        )


@dataclass(frozen=True)
class SplitSpec:
    """Chronological (train, val, test) ratios; always normalized to sum to one."""

    ratios: tuple[Fraction, Fraction, Fraction]

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise SplitError(f"Split ratios must be three non-negative numbers: {self.ratios}")
        if sum(self.ratios) != 1:
            raise SplitError(f"Split ratios must sum to 1, got {sum(self.ratios)}")

    @classmethod
    def from_parts(cls, parts: Sequence[float | int | str]) -> SplitSpec:
        """Build from relative parts such as ``(6, 2, 2)`` or ``(0.7, 0.1, 0.2)``."""
        fractions = [Fraction(str(p)) for p in parts]
        total = sum(fractions)
        if len(fractions) != 3 or total <= 0 or any(f < 0 for f in fractions):
            raise SplitError(f"Invalid split parts: {tuple(parts)}")
        return cls(tuple(f / total for f in fractions))  # type: ignore[arg-type]


@dataclass(frozen=True)
class NormStats:
    """Per-channel statistics of one input window (last axis is time)."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Sliding (input, target) windows over one split.

    Windows are views onto ``values``: window ``k`` covers rows
    ``origins[k] : origins[k] + input_length + horizon``.
    """

    values: np.ndarray
    origins: np.ndarray
    input_length: int
    horizon: int

    def __post_init__(self) -> None:
        origins = np.asarray(self.origins, dtype=np.int64)
        origins.setflags(write=False)
        object.__setattr__(self, "origins", origins)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def window(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(input C×T, target C×F)`` for one window."""
        start = int(self.origins[index])
        mid = start + self.input_length
        block = self.values[start : mid + self.horizon].T
        return block[:, : self.input_length], block[:, self.input_length :]

    def _stacked(self, offset: int, length: int) -> np.ndarray:
        view = sliding_window_view(self.values, length, axis=0)
        return np.ascontiguousarray(view[self.origins + offset])

    @property
    def inputs(self) -> np.ndarray:
        """All inputs, shape (n, C, T)."""
        return self._stacked(0, self.input_length)

    @property
    def targets(self) -> np.ndarray:
        """All targets, shape (n, C, F)."""
        return self._stacked(self.input_length, self.horizon)

    @property
    def norm_stats(self) -> NormStats:
        inputs = self.inputs
        return NormStats(
            mean=inputs.mean(axis=-1), std=np.maximum(inputs.std(axis=-1), STD_FLOOR)
        )

    def __getitem__(self, index: int) -> tuple[np.ndarray, ...]:
        x, y = self.window(index)
        x_norm, stats = instance_normalize(x)
        return (
            x_norm.astype(np.float32),
            y.astype(np.float32),
            stats.mean.astype(np.float32),
            stats.std.astype(np.float32),
        )


def _infer_frequency(timestamps: Sequence[str]) -> str:
    try:
        return pd.infer_freq(pd.to_datetime(list(timestamps[:1000]))) or ""
    except (TypeError, ValueError):
        return ""


def load_table(
    path: Path,
    *,
    missing: MissingPolicy = MissingPolicy.REJECT,
    frequency: str | None = None,
) -> RawSeries:
    """Read a benchmark CSV: header row, timestamp first, numeric channels after."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"Data file not found: {path}", path=str(path))

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise IngestionError(f"{path} is empty (header row required)", path=str(path)) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        row = line - 2 if line is not None else None
        raise IngestionError(
            f"Malformed row {row} (file line {line}) in {path}: {e}",
            path=str(path),
            row=row,
        ) from e

    if frame.shape[1] < 2:
        raise IngestionError(
            f"{path} needs a timestamp column and at least one channel column", path=str(path)
        )

    channels = [str(c) for c in frame.columns[1:]]
    raw = frame.iloc[:, 1:].apply(lambda col: col.str.strip())
    missing_mask = raw.isna() | raw.isin(_MISSING_TOKENS)
    checked = raw.apply(pd.to_numeric, errors="coerce")

    bad = checked.isna().to_numpy() & ~missing_mask.to_numpy()
    if bad.any():
        row, col = (int(i) for i in np.argwhere(bad)[0])
        raise IngestionError(
            f"Non-numeric value {raw.iat[row, col]!r} at row {row}, column {channels[col]!r}",
            path=str(path),
            row=row,
            column=channels[col],
        )

    # to_numeric only screens cells; its fast float parser is not round-trip exact.
    numeric = raw.mask(missing_mask).astype(np.float64)

    if missing_mask.to_numpy().any():
        row, col = (int(i) for i in np.argwhere(missing_mask.to_numpy())[0])
        if missing == MissingPolicy.REJECT:
            raise IngestionError(
                f"Missing value at row {row}, column {channels[col]!r}",
                path=str(path),
                row=row,
                column=channels[col],
            )
        numeric = numeric.ffill()
        if numeric.isna().to_numpy().any():
            raise IngestionError(
                f"Missing value at row {row}, column {channels[col]!r} has nothing to fill from",
                path=str(path),
                row=row,
                column=channels[col],
            )
        logger.warning(
            "missing_values_filled", path=str(path), count=int(missing_mask.to_numpy().sum())
        )

    timestamps = tuple(frame.iloc[:, 0].astype(str))
    series = RawSeries(
        values=numeric.to_numpy(dtype=np.float64),
        channel_names=tuple(channels),
        timestamps=timestamps,
        frequency=frequency if frequency is not None else _infer_frequency(timestamps),
    )
    logger.info("table_loaded", path=str(path), rows=series.rows, channels=series.n_channels)
    return series


def write_table(series: RawSeries, path: Path) -> None:
    """Write a series in the layout ``load_table`` reads."""
    frame = pd.DataFrame(series.values, columns=list(series.channel_names))
    frame.insert(0, TIMESTAMP_COLUMN, list(series.timestamps))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")


def split(
    raw: RawSeries, spec: SplitSpec, min_rows: int = 0
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Chronological train/val/test partition (floor for train and val, remainder to test)."""
    n_train = math.floor(spec.ratios[0] * raw.rows)
    n_val = math.floor(spec.ratios[1] * raw.rows)
    parts = (
        raw.slice(0, n_train),
        raw.slice(n_train, n_train + n_val),
        raw.slice(n_train + n_val, raw.rows),
    )
    for name, part in zip(("train", "val", "test"), parts, strict=True):
        if part.rows < min_rows:
            raise SplitError(
                f"The {name} split has {part.rows} rows; at least {min_rows} are needed",
                split=name,
                rows=part.rows,
                required=min_rows,
            )
    return parts


def make_windows(series: RawSeries, input_length: int, horizon: int, stride: int = 1) -> WindowSet:
    """Enumerate every (input, target) window, ordered by origin."""
    if stride < 1 or input_length < 1 or horizon < 1:
        raise WindowError(
            f"Window lengths and stride must be positive (T={input_length}, "
            f"F={horizon}, stride={stride})"
        )
    span = input_length + horizon
    if series.rows < span:
        raise WindowError(
            f"{series.rows} rows cannot hold a single window of {input_length}+{horizon} steps",
            rows=series.rows,
            required=span,
        )
    count = (series.rows - span) // stride + 1
    return WindowSet(
        values=series.values,
        origins=np.arange(count, dtype=np.int64) * stride,
        input_length=input_length,
        horizon=horizon,
    )


def instance_normalize(window: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Standardize each channel of a ``C×T`` window over time."""
    mean = window.mean(axis=-1)
    std = np.maximum(window.std(axis=-1), STD_FLOOR)
    return (window - mean[..., None]) / std[..., None], NormStats(mean=mean, std=std)


def denormalize(pred, stats: NormStats):
    """Invert ``instance_normalize`` for a ``C×F`` prediction (numpy or torch)."""
    return pred * stats.std[..., None] + stats.mean[..., None]


def few_shot_subset(
    train: WindowSet,
    fraction: float,
    seed: int = 0,
    mode: FewShotMode = FewShotMode.PREFIX,
) -> WindowSet:
    """Keep ``floor(fraction × |train|)`` windows: the chronological prefix, or a seeded sample."""
    if not 0 < fraction <= 1:
        raise WindowError(f"Few-shot fraction must be in (0, 1], got {fraction}")
    size = math.floor(Fraction(str(fraction)) * len(train))
    if size == 0:
        raise WindowError(
            f"Few-shot fraction {fraction} of {len(train)} windows leaves no training data"
        )
    if mode == FewShotMode.PREFIX:
        origins = train.origins[:size]
    else:
        rng = np.random.default_rng(seed)
        origins = train.origins[np.sort(rng.choice(len(train), size=size, replace=False))]
    logger.info("few_shot_subset", fraction=fraction, mode=str(mode), windows=size)
    return replace(train, origins=origins)


def fit_scaler(train: RawSeries) -> StandardScaler:
    """Per-channel standardization fitted on the training split only."""
    return StandardScaler().fit(train.values)


def apply_scaler(series: RawSeries, scaler: StandardScaler) -> RawSeries:
    if series.rows == 0:
        return series
    return replace(series, values=scaler.transform(series.values))
