"""Language-model branch: cross-modality channel embedding, correlation extractor,
channel and temporal layers over the frozen backbone blocks, and its forecast head.
"""

from __future__ import annotations

from dataclasses import dataclass

import structlog
import torch
from torch import nn

from plmcast.core.schemas import ModelConfig
from plmcast.errors import NumericalError, ShapeError
from plmcast.model.backbone import Backbone, layer_forward
from plmcast.model.patching import PatchEmbedding

logger = structlog.get_logger()


def global_correlation_map(features: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    """Row-stochastic channel map ``softmax_j(features[i] · memory[j])``.

    ``features`` is (..., C, D_r), ``memory`` is (C, D_r); the result is (..., C, C).
    """
    logits = features @ memory.transpose(-1, -2)
    if not torch.isfinite(logits).all():
        raise NumericalError("Non-finite correlation logits")
    return torch.softmax(logits, dim=-1)


def update_extractor(
    memory: torch.Tensor, global_map: torch.Tensor, momentum: float
) -> torch.Tensor:
    """Blend the extractor with its correlation-weighted self: ``γE + (1-γ) M_g E``."""
    return momentum * memory + (1 - momentum) * (global_map @ memory)


class CorrelationExtractor(nn.Module):
    """Learnable per-channel memory ``E`` (C, D_r) and the projection into its space."""

    def __init__(self, n_channels: int, width: int, dim: int, momentum: float):
        super().__init__()
        self.momentum = momentum
        self.projection = nn.Linear(width, dim)
        self.memory = nn.Parameter(torch.empty(n_channels, dim), requires_grad=momentum < 1)
        nn.init.normal_(self.memory, std=0.02)
        self._pending: list[torch.Tensor] = []

    def forward(self, channel_tokens: torch.Tensor) -> torch.Tensor:
        global_map = global_correlation_map(self.projection(channel_tokens), self.memory)
        if self.training and self.momentum < 1:
            pending = global_map.detach()
            self._pending.append(pending.reshape(-1, *pending.shape[-2:]).mean(dim=0))
        return global_map

    @torch.no_grad()
    def commit(self) -> None:
        """Apply one blend with the mean of every map staged since the last commit.

        With per-depth recomputation each depth stages its own map. A no-op outside
        training or when nothing is staged.
        """
        if not self.training or not self._pending:
            self._pending.clear()
            return
        staged = torch.stack(self._pending).mean(dim=0)
        self.memory.copy_(update_extractor(self.memory, staged, self.momentum))
        self._pending.clear()


@dataclass
class PLMEmbeddings:
    patches: torch.Tensor
    channels: torch.Tensor
    cross: torch.Tensor


class PLMBranch(nn.Module):
    def __init__(
        self,
        backbone: Backbone,
        cfg: ModelConfig,
        n_channels: int,
        input_length: int,
        horizon: int,
        text_embedding: torch.Tensor | None = None,
    ):
        super().__init__()
        width = backbone.width
        self.backbone = backbone
        self.correlation_weight = cfg.correlation_weight
        self.recompute_global_map = cfg.recompute_global_map
        self.use_channel_layer = cfg.use_channel_layer
        if not cfg.shared_blocks:
            backbone.split_channel_blocks()

        self.patch = PatchEmbedding(input_length, cfg.patch_size, cfg.patch_stride, width)
        self.n_patches = self.patch.n_patches
        if self.n_patches > backbone.max_positions:
            raise ShapeError(
                f"{self.n_patches} patches exceed the backbone's {backbone.max_positions} positions"
            )
        self.n_tokens = self.n_patches + (1 if cfg.use_channel_layer else 0)
        self.channel_embedding = nn.Linear(input_length, width)

        self.text_compressor: nn.Linear | None = None
        if cfg.use_text:
            if text_embedding is None:
                raise ShapeError("Text is enabled but no text embedding was supplied")
            self.register_buffer("text_embedding", text_embedding.detach().clone())
            length = text_embedding.shape[-2]
            self.text_compressor = nn.Linear(length, 1, bias=False)
            nn.init.constant_(self.text_compressor.weight, 1.0 / length)

        self.extractor: CorrelationExtractor | None = None
        if cfg.use_extractor and cfg.use_channel_layer:
            dim = cfg.extractor_dim or max(1, width // 4)
            self.extractor = CorrelationExtractor(
                n_channels, width, dim, cfg.extractor_momentum
            )

        self.head = nn.Linear(self.n_tokens * width, horizon)

    @property
    def depth(self) -> int:
        return self.backbone.n_plm

    def compress_text(self) -> torch.Tensor:
        """(C, L, D) text embedding to (C, D) via one learned weight per token position."""
        return self.text_compressor(self.text_embedding.transpose(-1, -2)).squeeze(-1)

    def embed(self, x_norm: torch.Tensor) -> PLMEmbeddings:
        patches = self.patch(x_norm) + self.backbone.wpe.weight[: self.n_patches]
        channels = self.channel_embedding(x_norm)
        cross = channels
        if self.text_compressor is not None:
            cross = channels + self.compress_text()
        return PLMEmbeddings(patches=patches, channels=channels, cross=cross)

    def global_map(self, channel_tokens: torch.Tensor) -> torch.Tensor | None:
        if self.extractor is None:
            return None
        return self.extractor(channel_tokens)

    def channel_layer(
        self, index: int, channel_tokens: torch.Tensor, global_map: torch.Tensor | None
    ) -> torch.Tensor:
        block = self.backbone.channel_blocks[index]
        out, _ = layer_forward(
            block,
            channel_tokens,
            global_map=global_map,
            correlation_weight=self.correlation_weight,
            causal=self.backbone.causal,
        )
        return out

    def temporal_layer(self, index: int, tokens: torch.Tensor) -> torch.Tensor:
        batch, channels, n, width = tokens.shape
        out, _ = layer_forward(
            self.backbone.h[index],
            tokens.reshape(batch * channels, n, width),
            causal=self.backbone.causal,
        )
        return out.reshape(batch, channels, n, width)

    def split(self, z_plm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Temporal tokens and the trailing channel token of a concatenated layer output."""
        if z_plm.shape[-2] != self.n_tokens:
            raise ShapeError(f"Expected {self.n_tokens} tokens, got {z_plm.shape[-2]}")
        if not self.use_channel_layer:
            return z_plm, None
        return z_plm[..., : self.n_patches, :], z_plm[..., self.n_patches, :]

    def layer(
        self,
        index: int,
        temporal: torch.Tensor,
        channel: torch.Tensor | None,
        global_map: torch.Tensor | None,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """One depth: returns ``Z_plm`` and the map used by the channel layer."""
        z_tem = self.temporal_layer(index, temporal)
        if channel is None:
            z_plm = z_tem
        else:
            if self.recompute_global_map and index > 0:
                global_map = self.global_map(channel)
            z_chan = self.channel_layer(index, channel, global_map)
            z_plm = torch.cat([z_tem, z_chan.unsqueeze(-2)], dim=-2)
        if index == self.depth - 1:
            z_plm = self.backbone.ln_f(z_plm)
        return z_plm, global_map

    def forecast(self, features: torch.Tensor) -> torch.Tensor:
        """Normalized forecast (B, C, F) from (B, C, N_m, D) features."""
        return self.head(features.flatten(start_dim=-2))

    def commit_extractor(self) -> None:
        if self.extractor is not None:
            self.extractor.commit()
