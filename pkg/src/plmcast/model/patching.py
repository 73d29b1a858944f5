"""Patch tokenization of input windows."""

from __future__ import annotations

import torch
from torch import nn

from plmcast.errors import ShapeError


def patch_count(input_length: int, patch_size: int, patch_stride: int) -> int:
    if patch_size > input_length:
        raise ShapeError(f"Patch size {patch_size} exceeds input length {input_length}")
    return (input_length - patch_size) // patch_stride + 1


class PatchEmbedding(nn.Module):
    """Split each channel into overlapping patches and project them to ``width``.

    Input (B, C, T), output (B, C, N_p, width). Trailing steps that do not fill a
    patch are dropped.
    """

    def __init__(self, input_length: int, patch_size: int, patch_stride: int, width: int):
        super().__init__()
        self.input_length = input_length
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.n_patches = patch_count(input_length, patch_size, patch_stride)
        self.projection = nn.Linear(patch_size, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_length:
            raise ShapeError(
                f"Expected windows of length {self.input_length}, got {x.shape[-1]}"
            )
        return self.projection(x.unfold(-1, self.patch_size, self.patch_stride))
