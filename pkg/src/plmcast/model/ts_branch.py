"""Time-series branch: patch tokens through a stack of transformer encoder layers."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import torch
from torch import nn

from plmcast.model.patching import PatchEmbedding


@runtime_checkable
class TimeSeriesBranch(Protocol):
    """What the fusion loop needs from a time-series branch; any module with these
    members can stand in for the patch transformer."""

    n_patches: int
    width: int
    depth: int

    def embed(self, x_norm: torch.Tensor) -> torch.Tensor: ...

    def layer(self, index: int, tokens: torch.Tensor) -> torch.Tensor: ...

    def forecast(self, tokens: torch.Tensor) -> torch.Tensor: ...


class PatchTransformerBranch(nn.Module):
    def __init__(
        self,
        input_length: int,
        horizon: int,
        patch_size: int,
        patch_stride: int,
        width: int,
        heads: int,
        ff_mult: int,
        depth: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.width = width
        self.depth = depth
        self.patch = PatchEmbedding(input_length, patch_size, patch_stride, width)
        self.n_patches = self.patch.n_patches
        self.position = nn.Parameter(torch.empty(self.n_patches, width))
        nn.init.normal_(self.position, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=width,
                nhead=heads,
                dim_feedforward=width * ff_mult,
                dropout=dropout,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )
            for _ in range(depth)
        )
        self.head = nn.Linear(self.n_patches * width, horizon)

    def embed(self, x_norm: torch.Tensor) -> torch.Tensor:
        """(B, C, T) to (B, C, N_p, D_t)."""
        return self.patch(x_norm) + self.position

    def layer(self, index: int, tokens: torch.Tensor) -> torch.Tensor:
        """Encoder layer ``index`` over the patch axis, channels folded into the batch."""
        batch, channels, n, width = tokens.shape
        out = self.layers[index](tokens.reshape(batch * channels, n, width))
        return out.reshape(batch, channels, n, width)

    def forecast(self, tokens: torch.Tensor) -> torch.Tensor:
        """Normalized forecast (B, C, F)."""
        return self.head(tokens.flatten(start_dim=-2))
