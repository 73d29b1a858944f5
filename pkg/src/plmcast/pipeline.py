"""From a validated RunConfig to data splits, descriptions and a ready model."""

from __future__ import annotations

from dataclasses import dataclass

import structlog
import torch

from plmcast.config import Settings, get_settings
from plmcast.core.models import DataSource
from plmcast.core.schemas import RunConfig
from plmcast.data.dataset import (
    RawSeries,
    SplitSpec,
    WindowSet,
    apply_scaler,
    few_shot_subset,
    fit_scaler,
    load_table,
    make_windows,
    split,
)
from plmcast.data.synthetic import channel_descriptions, generate
from plmcast.model.backbone import load_backbone
from plmcast.model.network import DualBranchForecaster
from plmcast.text.channel_text import (
    ChannelDescriptions,
    compose_descriptions,
    compute_channel_stats,
    encode_text,
)
from plmcast.training.trainer import FitResult, fit

logger = structlog.get_logger()


@dataclass(frozen=True)
class Splits:
    """Raw (unscaled) splits of one series."""

    train: RawSeries
    val: RawSeries
    test: RawSeries


@dataclass(frozen=True)
class PreparedWindows:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    channel_names: tuple[str, ...]


def load_series(cfg: RunConfig) -> RawSeries:
    if cfg.data.source == DataSource.SYNTHETIC:
        return generate(cfg.data.synthetic)
    return load_table(cfg.data.path, missing=cfg.data.missing)


def split_series(cfg: RunConfig, raw: RawSeries, horizon: int) -> Splits:
    spec = SplitSpec.from_parts(cfg.data.resolved_split())
    train, val, test = split(raw, spec, min_rows=cfg.data.input_length + horizon)
    return Splits(train=train, val=val, test=test)


def prepare_windows(cfg: RunConfig, splits: Splits, horizon: int) -> PreparedWindows:
    """Scale with train-fitted statistics (when enabled), window every split, apply few-shot."""
    train, val, test = splits.train, splits.val, splits.test
    if cfg.data.scale:
        scaler = fit_scaler(train)
        train, val, test = (apply_scaler(s, scaler) for s in (train, val, test))

    length, stride = cfg.data.input_length, cfg.data.stride
    train_w = make_windows(train, length, horizon, stride)
    if cfg.data.few_shot is not None:
        train_w = few_shot_subset(
            train_w, cfg.data.few_shot, seed=cfg.train.seed, mode=cfg.data.few_shot_mode
        )
    # Validation and test windows always use stride 1.
    windows = PreparedWindows(
        train=train_w,
        val=make_windows(val, length, horizon),
        test=make_windows(test, length, horizon),
        channel_names=splits.train.channel_names,
    )
    logger.info(
        "windows_prepared",
        horizon=horizon,
        train=len(windows.train),
        val=len(windows.val),
        test=len(windows.test),
    )
    return windows


def describe_channels(cfg: RunConfig, train: RawSeries) -> ChannelDescriptions:
    """Descriptions built from the unscaled training split.

    Synthetic data without a description file uses the generator's own channel text.
    """
    semantic = cfg.text.descriptions
    if semantic is None and cfg.data.source == DataSource.SYNTHETIC:
        semantic = channel_descriptions(cfg.data.synthetic)
    return compose_descriptions(
        semantic,
        compute_channel_stats(train),
        separator=cfg.text.separator,
        mode=cfg.text.mode,
        noise_rate=cfg.text.noise_rate,
        seed=cfg.text.seed,
    )


def build_model(
    cfg: RunConfig,
    n_channels: int,
    horizon: int,
    descriptions: ChannelDescriptions | None,
    settings: Settings | None = None,
) -> DualBranchForecaster:
    settings = settings or get_settings()
    backbone = text = None
    if cfg.has_plm:
        backbone = load_backbone(cfg.backbone, settings)
        if cfg.model.use_text and descriptions is not None:
            text = encode_text(descriptions, backbone, cfg.text.max_tokens)
    torch.manual_seed(cfg.train.seed)
    return DualBranchForecaster(cfg, n_channels, horizon, backbone, text)


@dataclass
class TrainedHorizon:
    """A model fitted for one horizon, with the windows it saw."""

    horizon: int
    model: DualBranchForecaster
    windows: PreparedWindows
    result: FitResult


def train_horizon(
    cfg: RunConfig, raw: RawSeries, horizon: int, settings: Settings | None = None
) -> TrainedHorizon:
    """Split, window, describe, build and fit one model for ``horizon``."""
    splits = split_series(cfg, raw, horizon)
    windows = prepare_windows(cfg, splits, horizon)
    descriptions = (
        describe_channels(cfg, splits.train) if cfg.has_plm and cfg.model.use_text else None
    )
    model = build_model(cfg, raw.n_channels, horizon, descriptions, settings)
    result = fit(model, windows.train, windows.val, cfg.train)
    logger.info(
        "horizon_trained",
        horizon=horizon,
        best_epoch=result.best_epoch,
        best_val_mse=result.best_val_mse,
        steps=result.steps,
    )
    return TrainedHorizon(horizon=horizon, model=model, windows=windows, result=result)
