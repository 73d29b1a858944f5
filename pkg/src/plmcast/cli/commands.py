"""Train, evaluate, ablate and analyze forecasting runs."""

import functools
import json
import sys
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Any

import structlog
import typer

from plmcast.cli.config_diff import compute_diff, format_changes, format_diff
from plmcast.cli.run_config import flag_overrides, load_run_config
from plmcast.config import get_settings
from plmcast.core.models import AnalysisKind, SweepParameter, Variant
from plmcast.core.schemas import EvalReport, RunConfig
from plmcast.errors import CheckpointError, PlmcastError
from plmcast.evaluation.harness import (
    DEFAULT_SWEEP_VALUES,
    cka_profile,
    correlation_analysis,
    horizon_result,
    report_frame,
    report_head,
    run_sensitivity,
    run_variant,
    sensitivity_frame,
    summarize,
    summarize_sensitivity,
    sweep_config,
    train_all,
    variant_config,
    write_cka,
    write_matrix,
)
from plmcast.helpers import configure_logging
from plmcast.pipeline import (
    PreparedWindows,
    describe_channels,
    load_series,
    prepare_windows,
    split_series,
)
from plmcast.text.channel_text import build_prompt
from plmcast.training.checkpoint import load_checkpoint

UTC = timezone.utc

logger = structlog.get_logger()

PARTIAL_MARKER = "PARTIAL"
CHECKPOINT_NAME = "checkpoint.safetensors"

# ── shared options ───────────────────────────────

ConfigOption = Annotated[
    Path | None, typer.Option("--config", help="Run-config file (JSON or YAML).")
]
DatasetOption = Annotated[
    str | None, typer.Option("--dataset", help="'synthetic' or a path to a benchmark CSV.")
]
HorizonOption = Annotated[
    list[int] | None, typer.Option("--horizon", help="Forecast horizon; repeat for a set.")
]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Training seed.")]
OutOption = Annotated[Path | None, typer.Option("--out", help="Output directory.")]
FewShotOption = Annotated[
    float | None, typer.Option("--few-shot", help="Fraction of training windows to keep.")
]
InputLengthOption = Annotated[
    int | None, typer.Option("--input-length", help="Input window length T.")
]
DescriptionsOption = Annotated[
    Path | None, typer.Option("--descriptions", help="Channel description file.")
]
CheckpointOption = Annotated[
    Path | None, typer.Option("--checkpoint", help="Checkpoint to load.")
]


def guarded(command: Callable[..., None]) -> Callable[..., None]:
    """Turn plmcast failures into a JSON error record on stderr and exit code 2."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            command(*args, **kwargs)
        except PlmcastError as e:
            logger.error("command_failed", error=e.kind, message=e.message)
            sys.stderr.write(json.dumps(e.to_record(), default=str) + "\n")
            raise typer.Exit(code=2) from e

    return wrapper


def resolve_config(
    config: Path | None,
    *,
    variant: Variant | None = None,
    **flags: Any,
) -> RunConfig:
    cfg = load_run_config(config, flag_overrides(**flags))
    if variant is not None:
        cfg = variant_config(cfg, variant)
    return cfg


@contextmanager
def run_directory(cfg: RunConfig, command: str) -> Iterator[Path]:
    """Output directory with config copy and run log; ``PARTIAL`` stays behind on failure."""
    settings = get_settings()
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / PARTIAL_MARKER
    marker.write_text(
        f"{command} started {datetime.now(UTC).isoformat()}\n", encoding="utf-8"
    )
    (out_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    configure_logging(settings.log_level, settings.log_json, out_dir / "run.log")
    structlog.contextvars.bind_contextvars(command=command, config_hash=cfg.config_hash())
    try:
        yield out_dir
    finally:
        structlog.contextvars.clear_contextvars()
    marker.unlink(missing_ok=True)
    logger.info("run_finished", command=command, out=str(out_dir))


def write_reports(
    reports: list[EvalReport],
    out_dir: Path,
    stem: str = "report",
    frame: Callable[[list[EvalReport]], Any] = report_frame,
) -> None:
    payload = [json.loads(r.model_dump_json()) for r in reports]
    (out_dir / f"{stem}.json").write_text(
        json.dumps(payload[0] if len(payload) == 1 else payload, indent=2), encoding="utf-8"
    )
    frame(reports).to_csv(out_dir / f"{stem}.csv", index=False)


def windows_for(cfg: RunConfig, horizon: int) -> PreparedWindows:
    raw = load_series(cfg)
    return prepare_windows(cfg, split_series(cfg, raw, horizon), horizon)


def checkpoint_paths(cfg: RunConfig, checkpoint: Path | None) -> list[Path]:
    if checkpoint is not None:
        return [checkpoint]
    paths = [cfg.output_dir / f"h{h}" / CHECKPOINT_NAME for h in cfg.data.horizons]
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise CheckpointError(f"Checkpoint not found: {missing[0]}", path=str(missing[0]))
    return paths


# ── describe ─────────────────────────────────────


@guarded
def describe(
    config: ConfigOption = None,
    dataset: DatasetOption = None,
    descriptions: DescriptionsOption = None,
    out: OutOption = None,
) -> None:
    """Print the channel-description prompt and validate a description file."""
    cfg = resolve_config(config, dataset=dataset, descriptions=descriptions, out=out)
    with run_directory(cfg, "describe") as out_dir:
        raw = load_series(cfg)
        prompt = build_prompt(cfg.data.name, cfg.data.resolved_domain(), raw.channel_names)
        (out_dir / "prompt.txt").write_text(prompt + "\n", encoding="utf-8")
        typer.echo(prompt)

        if cfg.text.descriptions is None:
            logger.info("description_validation_skipped", reason="no description file")
            typer.echo("\nNo description file given; validation skipped.")
            return

        splits = split_series(cfg, raw, max(cfg.data.horizons))
        composed = describe_channels(cfg, splits.train)
        texts = dict(zip(raw.channel_names, composed.combined, strict=True))
        (out_dir / "descriptions.json").write_text(json.dumps(texts, indent=2), encoding="utf-8")
        typer.echo(f"\nValidated {len(texts)} channel descriptions:")
        for name, text in texts.items():
            typer.echo(f"  {name}: {text}")


# ── train ────────────────────────────────────────


@guarded
def train(
    config: ConfigOption = None,
    dataset: DatasetOption = None,
    horizon: HorizonOption = None,
    variant: Annotated[
        Variant | None, typer.Option("--variant", help="Ablation variant to train.")
    ] = None,
    seed: SeedOption = None,
    out: OutOption = None,
    few_shot: FewShotOption = None,
    input_length: InputLengthOption = None,
    descriptions: DescriptionsOption = None,
) -> None:
    """Train one model per horizon; writes checkpoints and history CSVs."""
    cfg = resolve_config(
        config,
        variant=variant,
        dataset=dataset,
        horizons=horizon,
        seed=seed,
        out=out,
        few_shot=few_shot,
        input_length=input_length,
        descriptions=descriptions,
    )
    with run_directory(cfg, "train") as out_dir:
        for run in train_all(cfg, out_dir):
            typer.echo(
                f"h{run.horizon}: best epoch {run.result.best_epoch}, "
                f"val MSE {run.result.best_val_mse:.6f} "
                f"({run.result.parameters.trainable}/{run.result.parameters.total} trainable)"
            )


# ── eval ─────────────────────────────────────────


@guarded
def evaluate(
    config: ConfigOption = None,
    dataset: DatasetOption = None,
    horizon: HorizonOption = None,
    checkpoint: CheckpointOption = None,
    out: OutOption = None,
) -> None:
    """Score saved checkpoints on the test split; one report row per horizon."""
    cfg = resolve_config(config, dataset=dataset, horizons=horizon, out=out)
    paths = checkpoint_paths(cfg, checkpoint)
    with run_directory(cfg, "eval") as out_dir:
        results, gates, run_cfg = [], [], cfg
        for path in paths:
            model, run_cfg = load_checkpoint(path)
            windows = windows_for(run_cfg, model.horizon)
            results.append(horizon_result(model, windows.test))
            gates = model.gates()
        report = EvalReport(
            dataset=run_cfg.data.name,
            variant=run_cfg.variant,
            seed=run_cfg.train.seed,
            config_hash=run_cfg.config_hash(),
            head=report_head(run_cfg),
            results=results,
            gates=gates,
        )
        write_reports([report], out_dir)
        for row in report.results:
            typer.echo(f"h{row.horizon}: MSE {row.mse:.6f}  MAE {row.mae:.6f}")


# ── ablate ───────────────────────────────────────


@guarded
def ablate(
    config: ConfigOption = None,
    dataset: DatasetOption = None,
    horizon: HorizonOption = None,
    variant: Annotated[
        list[Variant] | None,
        typer.Option("--variant", help="Variant to run; repeat for several (default: all)."),
    ] = None,
    seeds: Annotated[
        list[int] | None, typer.Option("--seeds", help="Seed to repeat every variant with.")
    ] = None,
    seed: SeedOption = None,
    out: OutOption = None,
    few_shot: FewShotOption = None,
    input_length: InputLengthOption = None,
) -> None:
    """Run ablation variants over one or more seeds; writes reports and a seed summary."""
    base = resolve_config(
        config,
        dataset=dataset,
        horizons=horizon,
        seed=seed,
        out=out,
        few_shot=few_shot,
        input_length=input_length,
    )
    variants = list(variant or Variant)
    seed_list = list(seeds or [base.train.seed])
    # Validate every variant before training anything.
    planned = {v: variant_config(base, v) for v in variants}

    with run_directory(base, "ablate") as out_dir:
        reports: list[EvalReport] = []
        for s in seed_list:
            seeded = base.with_overrides({"train": {"seed": s}})
            for v in variants:
                diff = compute_diff(base, planned[v])
                logger.info("variant_config", variant=str(v), changes=format_changes(diff))
                report = run_variant(seeded, v, out_dir / str(v) / f"seed{s}")
                report.config_diff = format_changes(diff)
                reports.append(report)
                typer.echo(f"{v} (seed {s}):\n{format_diff(diff)}")
                for row in report.results:
                    typer.echo(f"  h{row.horizon}: MSE {row.mse:.6f}  MAE {row.mae:.6f}")
        write_reports(reports, out_dir)
        summarize(reports).to_csv(out_dir / "summary.csv", index=False)


# ── sensitivity ──────────────────────────────────


@guarded
def sensitivity(
    config: ConfigOption = None,
    dataset: DatasetOption = None,
    horizon: HorizonOption = None,
    parameter: Annotated[
        list[SweepParameter] | None,
        typer.Option("--parameter", help="Parameter to sweep; repeat for both (default: both)."),
    ] = None,
    value: Annotated[
        list[float] | None,
        typer.Option("--value", help="Value to try; repeat for several (default: 0.2 to 0.8)."),
    ] = None,
    seeds: Annotated[
        list[int] | None, typer.Option("--seeds", help="Seed to repeat every point with.")
    ] = None,
    out: OutOption = None,
    input_length: InputLengthOption = None,
) -> None:
    """Sweep the loss weight or the correlation weight one at a time; writes a seed summary."""
    base = resolve_config(
        config, dataset=dataset, horizons=horizon, out=out, input_length=input_length
    )
    parameters = parameter or list(SweepParameter)
    values = value or list(DEFAULT_SWEEP_VALUES)
    # Validate every point before training anything.
    for p in parameters:
        for v in values:
            sweep_config(base, p, v)

    with run_directory(base, "sensitivity") as out_dir:
        reports = run_sensitivity(base, parameters, values, seeds, out_dir)
        for report in reports:
            name, point = next(iter(report.sweep.items()))
            for row in report.results:
                typer.echo(
                    f"{name}={point:g} (seed {report.seed}) h{row.horizon}: "
                    f"MSE {row.mse:.6f}  MAE {row.mae:.6f}"
                )
        write_reports(reports, out_dir, frame=sensitivity_frame)
        summarize_sensitivity(reports).to_csv(out_dir / "sensitivity.csv", index=False)


# ── analyze ──────────────────────────────────────


@guarded
def analyze(
    config: ConfigOption = None,
    checkpoint: CheckpointOption = None,
    kind: Annotated[AnalysisKind, typer.Option("--kind", help="cka or corr.")] = AnalysisKind.CKA,
    out: OutOption = None,
) -> None:
    """Representation (CKA) or channel-correlation analysis of a trained checkpoint."""
    cfg = resolve_config(config, out=out)
    path = checkpoint_paths(cfg, checkpoint)[0]
    with run_directory(cfg, "analyze") as out_dir:
        model, run_cfg = load_checkpoint(path)
        windows = windows_for(run_cfg, model.horizon)
        report = EvalReport(
            dataset=run_cfg.data.name,
            variant=run_cfg.variant,
            seed=run_cfg.train.seed,
            config_hash=run_cfg.config_hash(),
            head=report_head(run_cfg),
            results=[horizon_result(model, windows.test)],
            gates=model.gates(),
        )
        if kind == AnalysisKind.CKA:
            profile = cka_profile(model, windows.test, cfg.analysis.max_samples)
            write_cka(profile, out_dir / "cka.csv")
            report.cka = profile
            for name, values in profile.items():
                typer.echo(f"{name}: " + ", ".join(f"{v:.4f}" for v in values))
        else:
            analysis = correlation_analysis(
                model, windows.test, cfg.analysis.window_index, cfg.analysis.max_samples
            )
            maps = analysis.maps()
            for name, matrix in maps.items():
                write_matrix(matrix, windows.channel_names, out_dir / f"corr_{name}.csv")
            report.correlation = {name: matrix.tolist() for name, matrix in maps.items()}
            typer.echo(
                f"strongest predicted pair {analysis.predicted_pair}, "
                f"future pair {analysis.future_pair}, agree={analysis.agrees}"
            )
        write_reports([report], out_dir, stem="analysis")
