"""Cross-model fusion between the language-model and time-series branches.

Per depth, the language-model features are first merged with the stream
accumulated over earlier depths (memory and current attention, gated), then
injected into the time-series tokens by cross attention with a residual sum.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from plmcast.core.models import FusionMode
from plmcast.core.schemas import ModelConfig
from plmcast.errors import ShapeError


def attention(
    query: torch.Tensor, key: torch.Tensor, value: torch.Tensor, heads: int = 1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over the token axis.

    ``query`` is (..., Nq, D), ``key``/``value`` (..., Nk, D). Returns the output
    (..., Nq, D) and the weights (..., heads, Nq, Nk).
    """
    if key.shape[-2] != value.shape[-2] or query.shape[-1] != key.shape[-1]:
        raise ShapeError(
            f"Incompatible attention shapes q={tuple(query.shape)} "
            f"k={tuple(key.shape)} v={tuple(value.shape)}"
        )
    dim = query.shape[-1]
    if dim % heads:
        raise ShapeError(f"Width {dim} is not divisible by {heads} heads")

    def split(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-1], heads, t.shape[-1] // heads).transpose(-3, -2)

    q, k, v = split(query), split(key), split(value)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dim // heads), dim=-1)
    out = (weights @ v).transpose(-3, -2)
    return out.reshape(*out.shape[:-2], -1), weights


def _projection(width_in: int, width_out: int) -> nn.Linear:
    return nn.Linear(width_in, width_out, bias=False)


class CMFBlock(nn.Module):
    """Fusion at one depth.

    ``mix`` produces the accumulated language-model stream ``Z_mix``;
    ``cross`` folds it into the time-series tokens and returns ``Z_cross``.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        plm_width: int,
        ts_width: int,
        plm_tokens: int,
        ts_tokens: int,
        with_cross: bool = True,
    ):
        super().__init__()
        self.mode = cfg.fusion
        self.heads = cfg.fusion_heads
        self.use_memory = cfg.use_memory
        self.use_current = cfg.use_current
        self.plm_tokens = plm_tokens
        self.ts_tokens = ts_tokens

        if self.mode == FusionMode.CMF:
            if cfg.use_memory:
                self.q_current = _projection(plm_width, plm_width)
                self.k_memory = _projection(plm_width, plm_width)
                self.v_memory = _projection(plm_width, plm_width)
            if cfg.use_current:
                self.q_memory = _projection(plm_width, plm_width)
                self.k_current = _projection(plm_width, plm_width)
                self.v_current = _projection(plm_width, plm_width)
            if cfg.use_gating and cfg.use_memory and cfg.use_current:
                self.gate_logit = nn.Parameter(torch.zeros(()))
            else:
                self.register_buffer("gate_logit", torch.zeros(()))

        if not with_cross:
            return
        if self.mode in (FusionMode.CMF, FusionMode.ATTENTION):
            self.q_cross = _projection(ts_width, ts_width)
            self.k_cross = _projection(plm_width, ts_width)
            self.v_cross = _projection(plm_width, ts_width)
        elif self.mode == FusionMode.SUM:
            self.token_map = nn.Linear(plm_tokens, ts_tokens)
            self.feature_map = nn.Linear(plm_width, ts_width)
        elif self.mode == FusionMode.CONCAT:
            self.token_map = nn.Linear(plm_tokens, ts_tokens)
            self.feature_map = nn.Linear(plm_width + ts_width, ts_width)
        else:
            raise ShapeError(f"Unknown fusion mode {self.mode!r}")

    @property
    def gate(self) -> torch.Tensor | None:
        """β in (0, 1), or ``None`` when this block does not gate."""
        if self.mode != FusionMode.CMF:
            return None
        return torch.sigmoid(self.gate_logit)

    def memory_attention(self, z_plm: torch.Tensor, z_mix_prev: torch.Tensor) -> torch.Tensor:
        out, _ = attention(
            self.q_current(z_plm), self.k_memory(z_mix_prev), self.v_memory(z_mix_prev), self.heads
        )
        return out

    def current_attention(self, z_mix_prev: torch.Tensor, z_plm: torch.Tensor) -> torch.Tensor:
        out, _ = attention(
            self.q_memory(z_mix_prev), self.k_current(z_plm), self.v_current(z_plm), self.heads
        )
        return out

    @staticmethod
    def gated_fusion(
        attn_mix: torch.Tensor, attn_plm: torch.Tensor, beta: torch.Tensor
    ) -> torch.Tensor:
        if attn_mix.shape != attn_plm.shape:
            raise ShapeError(f"Cannot gate {tuple(attn_mix.shape)} with {tuple(attn_plm.shape)}")
        return beta * attn_mix + (1 - beta) * attn_plm

    def mix(self, z_plm: torch.Tensor, z_mix_prev: torch.Tensor | None) -> torch.Tensor:
        """``Z_mix`` for this depth; at the first depth the previous stream is ``z_plm`` itself."""
        if self.mode != FusionMode.CMF:
            return z_plm
        if z_mix_prev is None:
            z_mix_prev = z_plm
        if z_mix_prev.shape != z_plm.shape:
            raise ShapeError(
                f"Accumulated stream {tuple(z_mix_prev.shape)} does not match {tuple(z_plm.shape)}"
            )
        if not self.use_current:
            return self.memory_attention(z_plm, z_mix_prev)
        if not self.use_memory:
            return self.current_attention(z_mix_prev, z_plm)
        return self.gated_fusion(
            self.memory_attention(z_plm, z_mix_prev),
            self.current_attention(z_mix_prev, z_plm),
            self.gate,
        )

    def cross_model_attention(self, ts_query: torch.Tensor, z_mix: torch.Tensor) -> torch.Tensor:
        out, _ = attention(
            self.q_cross(ts_query), self.k_cross(z_mix), self.v_cross(z_mix), self.heads
        )
        return out

    @staticmethod
    def cross_residual(attn_cross: torch.Tensor, z_ts: torch.Tensor) -> torch.Tensor:
        if attn_cross.shape != z_ts.shape:
            raise ShapeError(f"Cannot add {tuple(attn_cross.shape)} to {tuple(z_ts.shape)}")
        return attn_cross + z_ts

    def _align_tokens(self, z_mix: torch.Tensor) -> torch.Tensor:
        return self.token_map(z_mix.transpose(-1, -2)).transpose(-1, -2)

    def cross(self, ts_query: torch.Tensor, z_ts: torch.Tensor, z_mix: torch.Tensor) -> torch.Tensor:
        """``Z_cross`` from the time-series layer input, its output and ``Z_mix``."""
        if self.mode in (FusionMode.CMF, FusionMode.ATTENTION):
            return self.cross_residual(self.cross_model_attention(ts_query, z_mix), z_ts)
        aligned = self._align_tokens(z_mix)
        if self.mode == FusionMode.SUM:
            return z_ts + self.feature_map(aligned)
        return self.feature_map(torch.cat([z_ts, aligned], dim=-1))
