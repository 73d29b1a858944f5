"""Pydantic run configuration and report records."""

from __future__ import annotations

from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from plmcast.core.models import (
    Arch,
    Branches,
    CrossFeed,
    DataSource,
    FewShotMode,
    FreezeMode,
    FusionMode,
    HeadSource,
    MissingPolicy,
    Provenance,
    TextMode,
    Variant,
)
from plmcast.data.catalog import DEFAULT_SPLIT, lookup
from plmcast.data.synthetic import SyntheticSpec
from plmcast.errors import ConfigError
from plmcast.helpers import deep_merge, stable_hash


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    name: str = "synthetic"
    source: DataSource = DataSource.SYNTHETIC
    path: Path | None = None
    domain: str | None = None
    split: list[float] | None = None
    input_length: int = Field(default=96, ge=1)
    horizons: list[int] = Field(default_factory=lambda: [96], min_length=1)
    stride: int = Field(default=1, ge=1)
    scale: bool = True
    missing: MissingPolicy = MissingPolicy.REJECT
    few_shot: float | None = Field(default=None, gt=0, le=1)
    few_shot_mode: FewShotMode = FewShotMode.PREFIX
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)

    def resolved_split(self) -> list[float]:
        if self.split is not None:
            return self.split
        info = lookup(self.name)
        return list(info.split if info else DEFAULT_SPLIT)

    def resolved_domain(self) -> str:
        if self.domain:
            return self.domain
        info = lookup(self.name)
        return info.domain if info else "an unspecified domain"


class TextConfig(_Section):
    descriptions: Path | None = None
    max_tokens: int = Field(default=64, ge=1)
    mode: TextMode = TextMode.SEMANTIC
    noise_rate: float = Field(default=0.1, ge=0, le=1)
    separator: str = " "
    seed: int = 0


class BackboneConfig(_Section):
    arch: Arch = Arch.GPT2
    provenance: Provenance = Provenance.PRETRAINED
    n_plm: int = Field(default=6, ge=1)
    weights: str = "gpt2"
    width: int = Field(default=16, ge=1)
    heads: int = Field(default=2, ge=1)
    dropout: float = Field(default=0.0, ge=0, lt=1)
    causal: bool = False
    seed: int = Field(default=0, ge=0)


class ModelConfig(_Section):
    patch_size: int = Field(default=16, ge=1)
    patch_stride: int = Field(default=8, ge=1)
    ts_width: int = Field(default=128, ge=1)
    ts_heads: int = Field(default=8, ge=1)
    ts_ff_mult: int = Field(default=4, ge=1)
    extractor_dim: int | None = Field(default=None, ge=1)
    correlation_weight: float = Field(default=0.4, ge=0, le=1)
    extractor_momentum: float = Field(default=0.9, ge=0, le=1)
    branches: Branches = Branches.DUAL
    fusion: FusionMode = FusionMode.CMF
    use_memory: bool = True
    use_current: bool = True
    use_gating: bool = True
    fusion_heads: int = Field(default=1, ge=1)
    use_text: bool = True
    use_extractor: bool = True
    use_channel_layer: bool = True
    shared_blocks: bool = True
    recompute_global_map: bool = False
    head_source: HeadSource = HeadSource.MIX
    cross_feed: CrossFeed = CrossFeed.FORWARD


class TrainConfig(_Section):
    loss_weight: float = Field(default=0.6, ge=0, le=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=10, ge=1)
    patience: int = Field(default=3, ge=1)
    max_steps: int | None = Field(default=None, ge=1)
    seed: int = 2021
    freeze: FreezeMode = FreezeMode.DEFAULT
    shuffle: bool = True
    deterministic: bool = True


class AnalysisConfig(_Section):
    max_samples: int = Field(default=500, ge=2)
    window_index: int = Field(default=0, ge=0)


class RunConfig(_Section):
    """Everything a run depends on. Validated before any work starts."""

    data: DataConfig = Field(default_factory=DataConfig)
    text: TextConfig = Field(default_factory=TextConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    variant: Variant = Variant.FULL
    output_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def _check_conflicts(self) -> RunConfig:
        problems = conflicts(self)
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json", exclude={"output_dir"}))

    @property
    def has_plm(self) -> bool:
        return self.model.branches != Branches.TS_ONLY

    @property
    def has_ts(self) -> bool:
        return self.model.branches != Branches.PLM_ONLY

    def with_overrides(self, overrides: dict[str, Any]) -> RunConfig:
        return parse_run_config(deep_merge(self.model_dump(mode="json"), overrides))


def validation_problems(error: ValidationError) -> list[str]:
    """Flatten pydantic errors into ``location: message`` lines, one per conflict."""
    problems: list[str] = []
    for err in error.errors():
        location = ".".join(str(part) for part in err["loc"])
        message = err["msg"].removeprefix("Value error, ")
        for item in message.split("; "):
            problems.append(f"{location}: {item}" if location else item)
    return problems


def parse_run_config(data: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(validation_problems(e)) from e


def conflicts(cfg: RunConfig) -> list[str]:
    """Every cross-field contradiction in ``cfg``, in a stable order."""
    problems: list[str] = []
    data, model, backbone = cfg.data, cfg.model, cfg.backbone

    if data.source == DataSource.CSV and data.path is None:
        problems.append("data.source=csv requires data.path")
    split = data.resolved_split()
    if len(split) != 3 or any(p < 0 for p in split) or sum(split) <= 0:
        problems.append(f"data.split must be three non-negative parts, got {split}")
    if any(h < 1 for h in data.horizons):
        problems.append(f"data.horizons must be positive, got {data.horizons}")
    if model.patch_size > data.input_length:
        problems.append(
            f"model.patch_size={model.patch_size} exceeds data.input_length={data.input_length}"
        )
    if model.ts_width % model.ts_heads:
        problems.append(f"model.ts_width={model.ts_width} not divisible by ts_heads")
    tiny = backbone.provenance == Provenance.STUB or backbone.arch == Arch.STUB
    if tiny and backbone.width % backbone.heads:
        problems.append(f"backbone.width={backbone.width} not divisible by backbone.heads")
    if backbone.provenance == Provenance.PRETRAINED and backbone.arch == Arch.STUB:
        problems.append("backbone.arch=stub has no pretrained weights")
    if backbone.provenance in (Provenance.LLM2ATTN, Provenance.LLM2TRSF) and backbone.n_plm != 1:
        problems.append(f"backbone.provenance={backbone.provenance} requires backbone.n_plm=1")

    if not (model.use_memory or model.use_current):
        problems.append("model.use_memory and model.use_current cannot both be false")
    if model.fusion != FusionMode.CMF:
        for flag in ("use_memory", "use_current", "use_gating"):
            if not getattr(model, flag):
                problems.append(f"model.{flag}=false only applies to fusion=cmf")
    if not model.use_text and cfg.text.mode != TextMode.SEMANTIC:
        problems.append(f"text.mode={cfg.text.mode} has no effect with model.use_text=false")

    if model.branches == Branches.TS_ONLY:
        plm_side = {
            "model.use_text": not model.use_text,
            "model.use_extractor": not model.use_extractor,
            "model.use_channel_layer": not model.use_channel_layer,
            "model.fusion": model.fusion != FusionMode.CMF,
            "text.mode": cfg.text.mode != TextMode.SEMANTIC,
            "train.freeze": cfg.train.freeze != FreezeMode.DEFAULT,
        }
        problems.extend(
            f"{key} changes the PLM branch, which model.branches=ts_only removes"
            for key, changed in plm_side.items()
            if changed
        )
    if model.branches == Branches.PLM_ONLY and model.fusion != FusionMode.CMF:
        problems.append("model.fusion changes the time-series side, which plm_only removes")
    return problems


class HorizonResult(BaseModel):
    horizon: int
    mse: float
    mae: float
    test_windows: int


class ParameterAudit(BaseModel):
    total: int
    trainable: int
    frozen: int


class EvalReport(BaseModel):
    """Metrics for one variant over a horizon set, plus optional analyses."""

    dataset: str
    variant: Variant
    seed: int
    config_hash: str
    head: str = "ts"
    results: list[HorizonResult]
    parameters: ParameterAudit | None = None
    gates: list[float] = Field(default_factory=list)
    cka: dict[str, list[float]] | None = None
    correlation: dict[str, list[list[float]]] | None = None
    config_diff: list[str] = Field(default_factory=list)
    sweep: dict[str, float] = Field(default_factory=dict)
