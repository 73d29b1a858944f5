"""The assembled dual-branch forecaster."""

from __future__ import annotations

from dataclasses import dataclass, field

import structlog
import torch
from torch import nn

from plmcast.core.models import CrossFeed, HeadSource
from plmcast.core.schemas import RunConfig
from plmcast.data.dataset import NormStats, denormalize
from plmcast.errors import ShapeError
from plmcast.model.backbone import Backbone
from plmcast.model.cmf import CMFBlock
from plmcast.model.plm_branch import PLMBranch
from plmcast.model.ts_branch import PatchTransformerBranch

logger = structlog.get_logger()


@dataclass
class LayerFeatures:
    """Per-depth snapshots; lists are empty for a branch the model does not carry."""

    z_plm: list[torch.Tensor] = field(default_factory=list)
    z_mix: list[torch.Tensor] = field(default_factory=list)
    z_ts: list[torch.Tensor] = field(default_factory=list)
    z_cross: list[torch.Tensor] = field(default_factory=list)
    n_patches: int = 0

    @property
    def z_tem(self) -> list[torch.Tensor]:
        return [z[..., : self.n_patches, :] for z in self.z_plm]

    @property
    def z_chan(self) -> list[torch.Tensor]:
        return [z[..., self.n_patches, :] for z in self.z_plm if z.shape[-2] > self.n_patches]


@dataclass
class ForecastOutput:
    y_ts: torch.Tensor | None
    y_plm: torch.Tensor | None
    global_map: torch.Tensor | None
    features: LayerFeatures

    @property
    def prediction(self) -> torch.Tensor:
        """The inference output: the time-series head when the model has one."""
        return self.y_ts if self.y_ts is not None else self.y_plm


class DualBranchForecaster(nn.Module):
    def __init__(
        self,
        cfg: RunConfig,
        n_channels: int,
        horizon: int,
        backbone: Backbone | None = None,
        text_embedding: torch.Tensor | None = None,
    ):
        super().__init__()
        model_cfg = cfg.model
        self.n_channels = n_channels
        self.input_length = cfg.data.input_length
        self.horizon = horizon
        self.branches = model_cfg.branches
        self.cross_feed = model_cfg.cross_feed
        self.head_source = model_cfg.head_source

        self.plm: PLMBranch | None = None
        self.ts: PatchTransformerBranch | None = None
        self.fusion: nn.ModuleList | None = None

        if cfg.has_plm:
            if backbone is None:
                raise ShapeError(f"branches={self.branches} needs a backbone")
            self.plm = PLMBranch(
                backbone, model_cfg, n_channels, self.input_length, horizon, text_embedding
            )
        self.depth = self.plm.depth if self.plm is not None else cfg.backbone.n_plm

        if cfg.has_ts:
            self.ts = PatchTransformerBranch(
                input_length=self.input_length,
                horizon=horizon,
                patch_size=model_cfg.patch_size,
                patch_stride=model_cfg.patch_stride,
                width=model_cfg.ts_width,
                heads=model_cfg.ts_heads,
                ff_mult=model_cfg.ts_ff_mult,
                depth=self.depth,
            )

        mixes = self.plm is not None and (
            self.ts is not None or self.head_source == HeadSource.MIX
        )
        if mixes:
            self.fusion = nn.ModuleList(
                CMFBlock(
                    model_cfg,
                    plm_width=self.plm.backbone.width,
                    ts_width=model_cfg.ts_width,
                    plm_tokens=self.plm.n_tokens,
                    ts_tokens=self.ts.n_patches if self.ts is not None else 0,
                    with_cross=self.ts is not None,
                )
                for _ in range(self.depth)
            )
        logger.info(
            "model_built",
            branches=str(self.branches),
            depth=self.depth,
            parameters=sum(p.numel() for p in self.parameters()),
        )

    def forward(
        self, x_norm: torch.Tensor, mean: torch.Tensor, std: torch.Tensor
    ) -> ForecastOutput:
        """Forecast from instance-normalized windows (B, C, T) and their stats (B, C)."""
        if x_norm.shape[-2:] != (self.n_channels, self.input_length):
            raise ShapeError(
                f"Expected windows of shape (C={self.n_channels}, T={self.input_length}), "
                f"got {tuple(x_norm.shape[-2:])}"
            )
        features = LayerFeatures()
        stats = NormStats(mean=mean, std=std)
        global_map = None

        temporal = channel = None
        if self.plm is not None:
            features.n_patches = self.plm.n_patches
            emb = self.plm.embed(x_norm)
            temporal = emb.patches
            channel = emb.cross if self.plm.use_channel_layer else None
            if channel is not None:
                global_map = self.plm.global_map(channel)
        ts_in = self.ts.embed(x_norm) if self.ts is not None else None

        z_mix = None
        layer_map = global_map
        for i in range(self.depth):
            if self.plm is not None:
                z_plm, layer_map = self.plm.layer(i, temporal, channel, layer_map)
                features.z_plm.append(z_plm)
                if self.fusion is not None:
                    z_mix = self.fusion[i].mix(z_plm, z_mix)
                    features.z_mix.append(z_mix)
                if i + 1 < self.depth:
                    temporal, channel = self.plm.split(z_plm)

            if self.ts is not None:
                z_ts = self.ts.layer(i, ts_in)
                features.z_ts.append(z_ts)
                z_cross = z_ts if self.plm is None else self.fusion[i].cross(ts_in, z_ts, z_mix)
                features.z_cross.append(z_cross)
                ts_in = z_cross if self.cross_feed == CrossFeed.FORWARD else z_ts

        y_ts = y_plm = None
        if self.ts is not None:
            y_ts = denormalize(self.ts.forecast(features.z_cross[-1]), stats)
        if self.plm is not None:
            source = features.z_mix if self.head_source == HeadSource.MIX else features.z_plm
            y_plm = denormalize(self.plm.forecast(source[-1]), stats)
        return ForecastOutput(y_ts=y_ts, y_plm=y_plm, global_map=global_map, features=features)

    def commit_extractor(self) -> None:
        """Persist the extractor blend staged by the last training forward."""
        if self.plm is not None:
            self.plm.commit_extractor()

    def gates(self) -> list[float]:
        if self.fusion is None:
            return []
        return [float(b.gate) for b in self.fusion if b.gate is not None]
