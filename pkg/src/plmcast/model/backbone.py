"""Frozen GPT-2 style transformer layers and their fine-tuning policy."""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import structlog
import torch
from torch import nn
from transformers import GPT2Config, GPT2Model, GPT2TokenizerFast
from transformers.models.gpt2.modeling_gpt2 import GPT2Block

from plmcast.config import Settings, get_settings
from plmcast.core.models import Arch, FreezeMode, Provenance
from plmcast.core.schemas import BackboneConfig
from plmcast.errors import BackboneLoadError, FreezePolicyError, ShapeError

logger = structlog.get_logger()

STUB_VOCAB = 257
STUB_POSITIONS = 128
# Spawn key for random_init weights, distinct from the stub draw under the same seed.
RANDOM_INIT_STREAM = 1


class Tokenizer(Protocol):
    eos_token_id: int

    def encode(self, text: str) -> list[int]: ...


class ByteTokenizer:
    """UTF-8 bytes as token ids, 256 as end-of-text. Pairs with the stub vocabulary."""

    eos_token_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


class Backbone(nn.Module):
    """Token/position tables, ``n_plm`` transformer blocks and the final norm.

    Parameter names follow the GPT-2 layout (``wte``, ``wpe``, ``h.<i>.*``, ``ln_f``)
    so the freeze policy can classify them by pattern.
    """

    def __init__(
        self,
        gpt: GPT2Model,
        tokenizer: Tokenizer,
        provenance: Provenance,
        causal: bool = False,
    ):
        super().__init__()
        self.wte = gpt.wte
        self.wpe = gpt.wpe
        self.h = gpt.h
        self.ln_f = gpt.ln_f
        self.h_channel: nn.ModuleList | None = None
        self.config = gpt.config
        self.tokenizer = tokenizer
        self.provenance = provenance
        self.causal = causal

    @property
    def channel_blocks(self) -> nn.ModuleList:
        """Blocks used over the channel axis: the temporal blocks unless split off."""
        return self.h if self.h_channel is None else self.h_channel

    def split_channel_blocks(self) -> None:
        """Give the channel layers their own copy of every block."""
        if self.h_channel is None:
            self.h_channel = copy.deepcopy(self.h)

    @property
    def width(self) -> int:
        return self.wte.embedding_dim

    @property
    def n_plm(self) -> int:
        return len(self.h)

    @property
    def max_positions(self) -> int:
        return self.wpe.num_embeddings


def _dropout_overrides(cfg: BackboneConfig) -> dict[str, float]:
    return {"resid_pdrop": cfg.dropout, "embd_pdrop": cfg.dropout, "attn_pdrop": cfg.dropout}


def _tiny_config(cfg: BackboneConfig, n_layer: int) -> GPT2Config:
    return GPT2Config(
        vocab_size=STUB_VOCAB,
        n_positions=STUB_POSITIONS,
        n_embd=cfg.width,
        n_layer=n_layer,
        n_head=cfg.heads,
        bos_token_id=ByteTokenizer.eos_token_id,
        eos_token_id=ByteTokenizer.eos_token_id,
        **_dropout_overrides(cfg),
    )


def _published_config(cfg: BackboneConfig, settings: Settings, n_layer: int) -> GPT2Config:
    """The published architecture's shape; library defaults when no local config exists."""
    try:
        config = GPT2Config.from_pretrained(
            settings.resolve_weights(cfg.weights), local_files_only=settings.offline
        )
    except OSError:
        logger.warning("backbone_config_unavailable", weights=cfg.weights, fallback="GPT2Config()")
        config = GPT2Config()
    config.n_layer = n_layer
    for key, value in _dropout_overrides(cfg).items():
        setattr(config, key, value)
    return config


def _load_tokenizer(cfg: BackboneConfig, settings: Settings, strict: bool) -> Tokenizer:
    try:
        return GPT2TokenizerFast.from_pretrained(
            settings.resolve_weights(cfg.weights), local_files_only=settings.offline
        )
    except OSError as e:
        if strict:
            raise BackboneLoadError(
                f"Tokenizer for {cfg.weights!r} not found: {e}", weights=cfg.weights
            ) from e
        logger.warning("tokenizer_unavailable", weights=cfg.weights, fallback="bytes")
        return ByteTokenizer()


def _load_pretrained(cfg: BackboneConfig, settings: Settings, n_layer: int) -> GPT2Model:
    source = settings.resolve_weights(cfg.weights)
    try:
        gpt = GPT2Model.from_pretrained(
            source, local_files_only=settings.offline, **_dropout_overrides(cfg)
        )
    except (OSError, RuntimeError, ValueError) as e:
        match = re.search(r"size mismatch for ([\w.]+)", str(e))
        tensor = match.group(1) if match else None
        raise BackboneLoadError(
            f"Could not load pretrained weights {source!r}"
            + (f" (tensor {tensor})" if tensor else "")
            + f": {e}",
            weights=source,
            tensor=tensor,
        ) from e
    available = len(gpt.h)
    if n_layer > available:
        raise BackboneLoadError(
            f"Requested {n_layer} layers but {source!r} has {available}",
            weights=source,
            available=available,
        )
    gpt.h = gpt.h[:n_layer]
    gpt.config.n_layer = n_layer
    return gpt


def _init_seed(cfg: BackboneConfig) -> int:
    if cfg.provenance != Provenance.RANDOM_INIT:
        return cfg.seed
    sequence = np.random.SeedSequence(cfg.seed, spawn_key=(RANDOM_INIT_STREAM,))
    return int(sequence.generate_state(1)[0])


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def load_backbone(cfg: BackboneConfig, settings: Settings | None = None) -> Backbone:
    """Build the first ``n_plm`` blocks of the configured architecture."""
    settings = settings or get_settings()
    provenance = cfg.provenance
    tiny = provenance == Provenance.STUB or cfg.arch == Arch.STUB

    if provenance == Provenance.PRETRAINED:
        gpt = _load_pretrained(cfg, settings, cfg.n_plm)
        tokenizer = _load_tokenizer(cfg, settings, strict=True)
    elif provenance in (Provenance.STUB, Provenance.RANDOM_INIT):
        config = _tiny_config(cfg, cfg.n_plm) if tiny else _published_config(cfg, settings, cfg.n_plm)
        gpt = _seeded(_init_seed(cfg), lambda: GPT2Model(config))
        tokenizer = ByteTokenizer() if tiny else _load_tokenizer(cfg, settings, strict=False)
    else:
        # One fresh block replaces the layer stack; tables come from the usual source.
        if tiny:
            gpt = _seeded(cfg.seed, lambda: GPT2Model(_tiny_config(cfg, 1)))
            tokenizer = ByteTokenizer()
        else:
            gpt = _load_pretrained(cfg, settings, 1)
            tokenizer = _load_tokenizer(cfg, settings, strict=True)
        block = _seeded(cfg.seed, lambda: GPT2Block(gpt.config, layer_idx=0))
        if provenance == Provenance.LLM2ATTN:
            block.ln_2 = None
            block.mlp = None
        gpt.h = nn.ModuleList([block])

    backbone = Backbone(gpt, tokenizer, provenance, causal=cfg.causal)
    backbone.eval()
    logger.info(
        "backbone_loaded",
        provenance=str(provenance),
        arch="stub" if tiny else str(cfg.arch),
        n_plm=backbone.n_plm,
        width=backbone.width,
    )
    return backbone


def backbone_from_config(
    gpt_config: dict, provenance: Provenance, causal: bool = False
) -> Backbone:
    """Untrained skeleton with the same tensor layout as a saved backbone."""
    gpt = GPT2Model(GPT2Config.from_dict(gpt_config))
    if provenance == Provenance.LLM2ATTN:
        for block in gpt.h:
            block.ln_2 = None
            block.mlp = None
    return Backbone(gpt, ByteTokenizer(), provenance, causal=causal)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    x = x.transpose(-3, -2)
    return x.reshape(*x.shape[:-2], -1)


def layer_forward(
    block: GPT2Block,
    tokens: torch.Tensor,
    global_map: torch.Tensor | None = None,
    correlation_weight: float = 0.0,
    causal: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run one pre-norm GPT-2 block over ``tokens`` (..., N, D).

    When ``global_map`` (..., N, N) is given, every head mixes values with
    ``w * global_map + (1 - w) * softmax(QK^T / sqrt(d_head))``. Returns the block
    output and the mixing weights actually applied (..., heads, N, N).
    """
    width = block.ln_1.normalized_shape[0]
    if tokens.shape[-1] != width:
        raise ShapeError(f"Block width {width} cannot take tokens of width {tokens.shape[-1]}")

    attn = block.attn
    hidden = block.ln_1(tokens)
    query, key, value = attn.c_attn(hidden).split(attn.split_size, dim=-1)
    query, key, value = (_split_heads(t, attn.num_heads) for t in (query, key, value))

    scores = query @ key.transpose(-1, -2) / math.sqrt(attn.head_dim)
    if causal:
        n = tokens.shape[-2]
        upper = torch.ones(n, n, dtype=torch.bool, device=tokens.device).triu(1)
        scores = scores.masked_fill(upper, torch.finfo(scores.dtype).min)
    weights = scores.softmax(dim=-1)
    if global_map is not None:
        weights = (
            correlation_weight * global_map.unsqueeze(-3) + (1 - correlation_weight) * weights
        )

    context = _merge_heads(attn.attn_dropout(weights) @ value)
    out = tokens + attn.resid_dropout(attn.c_proj(context))
    if block.mlp is not None:
        out = out + block.mlp(block.ln_2(out))
    return out, weights


@dataclass(frozen=True)
class FreezePolicy:
    """Backbone parameters matching any pattern train; everything else is frozen."""

    trainable_patterns: tuple[str, ...] = (r"^wpe\.", r"(^|\.)ln_")
    train_everything: bool = False

    @classmethod
    def for_mode(cls, mode: FreezeMode) -> FreezePolicy:
        if mode == FreezeMode.NO_FREEZE:
            return cls(train_everything=True)
        return cls()


@dataclass
class ParameterPartition:
    trainable: dict[str, nn.Parameter] = field(default_factory=dict)
    frozen: dict[str, nn.Parameter] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        trainable = sum(p.numel() for p in self.trainable.values())
        frozen = sum(p.numel() for p in self.frozen.values())
        return {"total": trainable + frozen, "trainable": trainable, "frozen": frozen}


def apply_freeze_policy(backbone: Backbone, policy: FreezePolicy) -> ParameterPartition:
    """Classify every backbone parameter exactly once and set ``requires_grad`` to match."""
    named = dict(backbone.named_parameters())
    compiled: list[re.Pattern[str]] = []
    for pattern in policy.trainable_patterns:
        try:
            regex = re.compile(pattern)
        except re.error as e:
            raise FreezePolicyError(f"Unknown freeze pattern {pattern!r}: {e}", pattern=pattern) from e
        if not any(regex.search(name) for name in named):
            raise FreezePolicyError(
                f"Freeze pattern {pattern!r} matches no backbone parameter", pattern=pattern
            )
        compiled.append(regex)

    partition = ParameterPartition()
    for name, param in named.items():
        trainable = policy.train_everything or any(r.search(name) for r in compiled)
        param.requires_grad_(trainable)
        (partition.trainable if trainable else partition.frozen)[name] = param

    if set(partition.trainable) & set(partition.frozen) or len(partition.trainable) + len(
        partition.frozen
    ) != len(named):
        raise FreezePolicyError("Freeze policy did not classify every parameter exactly once")
    logger.info("freeze_policy_applied", **partition.counts())
    return partition
