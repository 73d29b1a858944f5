"""Seeded sinusoid datasets with known cross-channel coupling."""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from plmcast.data.dataset import RawSeries
from plmcast.errors import IngestionError

GOLDEN = (1 + math.sqrt(5)) / 2


class Coupling(BaseModel):
    """``target = alpha * source + noise``."""

    source: int = Field(ge=0)
    target: int = Field(ge=0)
    alpha: float = 0.9


class SyntheticSpec(BaseModel):
    n_channels: int = Field(default=3, ge=0)
    rows: int = Field(default=2000, ge=1)
    periods: list[float] = Field(default_factory=lambda: [24.0, 24.0, 24.0 * GOLDEN])
    phases: list[float] = Field(default_factory=lambda: [0.0, 0.0, 1.0])
    couplings: list[Coupling] = Field(default_factory=lambda: [Coupling(source=0, target=1)])
    noise_std: float = Field(default=0.05, ge=0.0)
    seed: int = 0
    start: str = "2016-07-01 00:00:00"
    freq: str = "h"

    @model_validator(mode="after")
    def _check_shapes(self) -> SyntheticSpec:
        if self.n_channels == 0:
            return self
        for name in ("periods", "phases"):
            if len(getattr(self, name)) != self.n_channels:
                raise ValueError(f"{name} needs one entry per channel ({self.n_channels})")
        if any(p <= 0 for p in self.periods):
            raise ValueError("periods must be positive")
        for c in self.couplings:
            if c.source >= self.n_channels or c.target >= self.n_channels:
                raise ValueError(f"coupling {c.source}->{c.target} names a missing channel")
            if c.source == c.target:
                raise ValueError("a channel cannot be coupled to itself")
        return self


def generate(spec: SyntheticSpec) -> RawSeries:
    """Build the series: one sinusoid per channel, then couplings applied in order."""
    if spec.n_channels < 1:
        raise IngestionError("Synthetic spec needs at least one channel", n_channels=spec.n_channels)

    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.rows, dtype=np.float64)
    periods = np.asarray(spec.periods, dtype=np.float64)
    phases = np.asarray(spec.phases, dtype=np.float64)
    clean = np.sin(2 * np.pi * t[:, None] / periods[None, :] + phases[None, :])
    for c in spec.couplings:
        clean[:, c.target] = c.alpha * clean[:, c.source]

    noise = rng.normal(0.0, spec.noise_std, size=clean.shape) if spec.noise_std > 0 else 0.0
    stamps = pd.date_range(spec.start, periods=spec.rows, freq=spec.freq)
    return RawSeries(
        values=clean + noise,
        channel_names=tuple(f"ch{i}" for i in range(spec.n_channels)),
        timestamps=tuple(stamps.strftime("%Y-%m-%d %H:%M:%S")),
        frequency=spec.freq,
    )


def target_correlation_map(spec: SyntheticSpec) -> np.ndarray:
    """Noise-free Pearson map implied by the couplings (±1 on coupled pairs, identity elsewhere)."""
    target = np.eye(spec.n_channels)
    for c in spec.couplings:
        sign = math.copysign(1.0, c.alpha) if c.alpha != 0 else 0.0
        target[c.source, c.target] = target[c.target, c.source] = sign
    return target


def channel_descriptions(spec: SyntheticSpec) -> dict[str, str]:
    """Semantic text for each generated channel, in the ``<channel>: <text>`` sense."""
    texts = {
        f"ch{i}": f"A sine wave of period {period:g} and phase {phase:g}."
        for i, (period, phase) in enumerate(zip(spec.periods, spec.phases, strict=True))
    }
    for c in spec.couplings:
        texts[f"ch{c.target}"] = f"Follows ch{c.source} scaled by {c.alpha:g}."
    return texts
