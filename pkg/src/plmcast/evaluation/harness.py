"""Variant runs, seed summaries and the feature analyses behind ``analyze``."""

from __future__ import annotations

import dataclasses
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import structlog
import torch

from plmcast.config import Settings, get_settings
from plmcast.core.models import (
    Branches,
    FreezeMode,
    FusionMode,
    Provenance,
    SweepParameter,
    TextMode,
    Variant,
)
from plmcast.core.schemas import EvalReport, HorizonResult, RunConfig
from plmcast.data.dataset import WindowSet
from plmcast.errors import AnalysisError
from plmcast.evaluation.analysis import (
    linear_cka,
    minmax_normalize,
    pearson_corr_map,
    strongest_pair,
)
from plmcast.helpers import seed_everything
from plmcast.model.network import DualBranchForecaster
from plmcast.pipeline import TrainedHorizon, load_series, train_horizon
from plmcast.training.checkpoint import save_checkpoint
from plmcast.training.trainer import evaluate, forecast, window_loader

logger = structlog.get_logger()

VARIANT_OVERRIDES: dict[Variant, dict[str, Any]] = {
    Variant.FULL: {},
    Variant.FUSION_SUM: {"model": {"fusion": FusionMode.SUM}},
    Variant.FUSION_CONCAT: {"model": {"fusion": FusionMode.CONCAT}},
    Variant.FUSION_ATTENTION: {"model": {"fusion": FusionMode.ATTENTION}},
    Variant.PLM_ONLY: {"model": {"branches": Branches.PLM_ONLY}},
    Variant.TS_ONLY: {"model": {"branches": Branches.TS_ONLY}},
    Variant.LLM2ATTN: {"backbone": {"provenance": Provenance.LLM2ATTN, "n_plm": 1}},
    Variant.LLM2TRSF: {"backbone": {"provenance": Provenance.LLM2TRSF, "n_plm": 1}},
    Variant.RANDOM_INIT: {"backbone": {"provenance": Provenance.RANDOM_INIT}},
    Variant.NO_FREEZE: {"train": {"freeze": FreezeMode.NO_FREEZE}},
    Variant.NO_TEXT: {"model": {"use_text": False}, "text": {"mode": TextMode.SEMANTIC}},
    Variant.RANDOM_TEXT: {"text": {"mode": TextMode.RANDOM}},
    Variant.NOISY_TEXT: {"text": {"mode": TextMode.NOISY}},
    Variant.NO_EXTRACTOR: {"model": {"use_extractor": False}},
    Variant.NO_CHANNEL_LAYER: {"model": {"use_channel_layer": False}},
    Variant.NO_CURRENT: {"model": {"use_current": False}},
    Variant.NO_MEMORY: {"model": {"use_memory": False}},
    Variant.NO_GATING: {"model": {"use_gating": False}},
    Variant.N_PLM_3: {"backbone": {"n_plm": 3}},
    Variant.N_PLM_6: {"backbone": {"n_plm": 6}},
    Variant.N_PLM_12: {"backbone": {"n_plm": 12}},
}

REPORT_COLUMNS = ["dataset", "variant", "seed", "head", "horizon", "mse", "mae", "config_hash"]
SUMMARY_COLUMNS = [
    "variant",
    "horizon",
    "seeds",
    "mse_mean",
    "mse_min",
    "mse_max",
    "mae_mean",
    "mae_min",
    "mae_max",
]

SWEEP_KEYS: dict[SweepParameter, tuple[str, str]] = {
    SweepParameter.LOSS_WEIGHT: ("train", "loss_weight"),
    SweepParameter.CORRELATION_WEIGHT: ("model", "correlation_weight"),
}
DEFAULT_SWEEP_VALUES = (0.2, 0.4, 0.6, 0.8)
SWEEP_COLUMNS = ["parameter", "value", "seed", "horizon", "mse", "mae", "config_hash"]


def variant_config(base: RunConfig, variant: Variant) -> RunConfig:
    """``base`` with the variant's overrides merged in and re-validated."""
    overrides = {"variant": variant, **VARIANT_OVERRIDES[variant]}
    return base.with_overrides(_jsonable(overrides))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, str):
        return str(value)
    return value


def report_head(cfg: RunConfig) -> str:
    return "plm" if cfg.model.branches == Branches.PLM_ONLY else "ts"


def train_all(
    cfg: RunConfig, out_dir: Path | None = None, settings: Settings | None = None
) -> list[TrainedHorizon]:
    """Train one model per configured horizon, saving checkpoint and history when asked."""
    settings = settings or get_settings()
    seed_everything(cfg.train.seed, settings.num_threads, cfg.train.deterministic)
    raw = load_series(cfg)
    trained = []
    for horizon in cfg.data.horizons:
        run = train_horizon(cfg, raw, horizon, settings)
        if out_dir is not None:
            horizon_dir = out_dir / f"h{horizon}"
            save_checkpoint(horizon_dir / "checkpoint.safetensors", run.model, cfg)
            run.result.history.to_csv(horizon_dir / "history.csv", index=False)
        trained.append(run)
    return trained


def horizon_result(model: DualBranchForecaster, windows: WindowSet) -> HorizonResult:
    scores = evaluate(model, windows)
    return HorizonResult(
        horizon=windows.horizon, mse=scores["mse"], mae=scores["mae"], test_windows=len(windows)
    )


def run_variant(
    base: RunConfig,
    variant: Variant,
    out_dir: Path | None = None,
    settings: Settings | None = None,
) -> EvalReport:
    """Train and test ``variant`` of ``base`` over every horizon."""
    cfg = variant_config(base, variant)
    logger.info("variant_started", variant=str(variant), seed=cfg.train.seed)
    trained = train_all(cfg, out_dir, settings)
    last = trained[-1]
    report = EvalReport(
        dataset=cfg.data.name,
        variant=variant,
        seed=cfg.train.seed,
        config_hash=cfg.config_hash(),
        head=report_head(cfg),
        results=[horizon_result(run.model, run.windows.test) for run in trained],
        parameters=last.result.parameters,
        gates=last.model.gates(),
    )
    for row in report.results:
        logger.info("variant_scored", variant=str(variant), **row.model_dump())
    return report


def report_rows(report: EvalReport) -> list[dict[str, Any]]:
    return [
        {
            "dataset": report.dataset,
            "variant": str(report.variant),
            "seed": report.seed,
            "head": report.head,
            "horizon": r.horizon,
            "mse": r.mse,
            "mae": r.mae,
            "config_hash": report.config_hash,
        }
        for r in report.results
    ]


def report_frame(reports: Iterable[EvalReport]) -> pd.DataFrame:
    rows = [row for report in reports for row in report_rows(report)]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def summarize(reports: Iterable[EvalReport]) -> pd.DataFrame:
    """Mean and range of MSE/MAE across seeds, one row per (variant, horizon)."""
    frame = report_frame(reports)
    if frame.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    summary = frame.groupby(["variant", "horizon"], sort=False).agg(
        seeds=("seed", "nunique"),
        mse_mean=("mse", "mean"),
        mse_min=("mse", "min"),
        mse_max=("mse", "max"),
        mae_mean=("mae", "mean"),
        mae_min=("mae", "min"),
        mae_max=("mae", "max"),
    )
    return summary.reset_index()[SUMMARY_COLUMNS]


def sweep_config(base: RunConfig, parameter: SweepParameter, value: float) -> RunConfig:
    """``base`` with one swept hyperparameter set to ``value``, re-validated."""
    section, key = SWEEP_KEYS[parameter]
    return base.with_overrides({section: {key: value}})


def run_sensitivity(
    base: RunConfig,
    parameters: Iterable[SweepParameter],
    values: Iterable[float] = DEFAULT_SWEEP_VALUES,
    seeds: Iterable[int] | None = None,
    out_dir: Path | None = None,
    settings: Settings | None = None,
) -> list[EvalReport]:
    """Vary each parameter over ``values`` with everything else at ``base``, per seed."""
    values, parameters = list(values), list(parameters)
    seeds = list(seeds) if seeds is not None else [base.train.seed]
    # Every point is validated before any training starts.
    plan = []
    for seed in seeds:
        seeded = base.with_overrides({"train": {"seed": seed}})
        for parameter in parameters:
            plan.extend((seed, parameter, v, sweep_config(seeded, parameter, v)) for v in values)

    reports = []
    for seed, parameter, value, cfg in plan:
        target = None
        if out_dir is not None:
            target = out_dir / str(parameter) / f"{value:g}" / f"seed{seed}"
        report = run_variant(cfg, Variant.FULL, target, settings)
        report.sweep = {str(parameter): value}
        reports.append(report)
    return reports


def sensitivity_frame(reports: Iterable[EvalReport]) -> pd.DataFrame:
    rows = [
        {
            "parameter": parameter,
            "value": value,
            "seed": report.seed,
            "horizon": r.horizon,
            "mse": r.mse,
            "mae": r.mae,
            "config_hash": report.config_hash,
        }
        for report in reports
        for parameter, value in report.sweep.items()
        for r in report.results
    ]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def summarize_sensitivity(reports: Iterable[EvalReport]) -> pd.DataFrame:
    """Mean and range across seeds, one row per (parameter, value, horizon)."""
    frame = sensitivity_frame(reports)
    columns = ["parameter", "value", *SUMMARY_COLUMNS[1:]]
    if frame.empty:
        return pd.DataFrame(columns=columns)
    summary = frame.groupby(["parameter", "value", "horizon"], sort=False).agg(
        seeds=("seed", "nunique"),
        mse_mean=("mse", "mean"),
        mse_min=("mse", "min"),
        mse_max=("mse", "max"),
        mae_mean=("mae", "mean"),
        mae_min=("mae", "min"),
        mae_max=("mae", "max"),
    )
    return summary.reset_index()[columns]


def sample_windows(windows: WindowSet, max_samples: int) -> WindowSet:
    """At most ``max_samples`` windows, evenly spaced over the set."""
    if len(windows) <= max_samples:
        return windows
    picks = np.unique(np.linspace(0, len(windows) - 1, max_samples).round().astype(np.int64))
    return dataclasses.replace(windows, origins=windows.origins[picks])


@torch.no_grad()
def cka_profile(
    model: DualBranchForecaster, windows: WindowSet, max_samples: int = 500
) -> dict[str, list[float]]:
    """Per-depth CKA between each feature stream and the raw input windows."""
    windows = sample_windows(windows, max_samples)
    if len(windows) < 2:
        raise AnalysisError("CKA needs at least two test windows", windows=len(windows))
    model.eval()
    streams: dict[str, list[list[np.ndarray]]] = {}
    for x, _, mean, std in window_loader(windows, batch_size=64):
        features = model(x, mean, std).features
        for name in ("z_plm", "z_mix", "z_ts", "z_cross"):
            depth_list = getattr(features, name)
            if not depth_list:
                continue
            slots = streams.setdefault(name, [[] for _ in depth_list])
            for slot, z in zip(slots, depth_list, strict=True):
                slot.append(z.reshape(z.shape[0], -1).double().numpy())

    inputs = windows.inputs.reshape(len(windows), -1)
    profile = {
        name: [linear_cka(np.concatenate(chunks), inputs) for chunks in slots]
        for name, slots in streams.items()
    }
    logger.info("cka_computed", samples=len(windows), streams=sorted(profile))
    return profile


@dataclass
class CorrelationAnalysis:
    predicted: np.ndarray
    future: np.ndarray
    mean_predicted: np.ndarray
    mean_future: np.ndarray
    window_index: int

    @property
    def predicted_pair(self) -> tuple[int, int]:
        return strongest_pair(self.mean_predicted)

    @property
    def future_pair(self) -> tuple[int, int]:
        return strongest_pair(self.mean_future)

    @property
    def agrees(self) -> bool:
        return self.predicted_pair == self.future_pair

    def maps(self) -> dict[str, np.ndarray]:
        """Min-max normalized matrices keyed by output name."""
        return {
            "predicted": minmax_normalize(self.predicted),
            "future": minmax_normalize(self.future),
            "mean_predicted": minmax_normalize(self.mean_predicted),
            "mean_future": minmax_normalize(self.mean_future),
        }


def correlation_analysis(
    model: DualBranchForecaster,
    windows: WindowSet,
    window_index: int = 0,
    max_samples: int = 500,
) -> CorrelationAnalysis:
    """Pearson maps of forecast and future for one window and averaged over sampled windows."""
    if window_index >= len(windows):
        raise AnalysisError(
            f"Window {window_index} is out of range for {len(windows)} test windows",
            window_index=window_index,
        )
    if windows.n_channels < 2:
        raise AnalysisError("Correlation maps need at least two channels")
    chosen = dataclasses.replace(windows, origins=windows.origins[[window_index]])
    pred_one, true_one = forecast(model, chosen)

    sampled = sample_windows(windows, max_samples)
    pred, true = forecast(model, sampled)
    analysis = CorrelationAnalysis(
        predicted=pearson_corr_map(pred_one[0]),
        future=pearson_corr_map(true_one[0]),
        mean_predicted=np.mean([pearson_corr_map(p) for p in pred], axis=0),
        mean_future=np.mean([pearson_corr_map(t) for t in true], axis=0),
        window_index=window_index,
    )
    logger.info(
        "correlation_computed",
        samples=len(sampled),
        predicted_pair=analysis.predicted_pair,
        future_pair=analysis.future_pair,
        agrees=analysis.agrees,
    )
    return analysis


def write_matrix(matrix: np.ndarray, names: tuple[str, ...], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(matrix, index=list(names), columns=list(names)).to_csv(path)
    return path


def write_cka(profile: dict[str, list[float]], path: Path) -> Path:
    rows = [
        {"stream": name, "depth": depth, "cka": value}
        for name, values in profile.items()
        for depth, value in enumerate(values, start=1)
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=["stream", "depth", "cka"]).to_csv(path, index=False)
    return path
