"""Cross-model fusion: memory/current attention, gating and cross attention."""

import math

import pytest
import torch
from torch.autograd import gradcheck

from plmcast.core.schemas import ModelConfig
from plmcast.errors import ShapeError
from plmcast.model.cmf import CMFBlock, attention

C, N_M, N_P, D = 3, 8, 7, 16


def _block(**overrides) -> CMFBlock:
    torch.manual_seed(0)
    cfg = ModelConfig(ts_width=D, ts_heads=2, **overrides)
    return CMFBlock(cfg, plm_width=D, ts_width=D, plm_tokens=N_M, ts_tokens=N_P)


def _attention_loop(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    out = torch.zeros(q.shape[0], v.shape[1], dtype=torch.float64)
    for i in range(q.shape[0]):
        scores = [float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(k.shape[0])]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for j, w in enumerate(weights):
            out[i] += (w / total) * v[j]
    return out


# ── Attention primitive ──────────────────────────


def test_attention_matches_loop_oracle():
    gen = torch.Generator().manual_seed(1)
    for _ in range(50):
        q = torch.randn(4, 8, generator=gen, dtype=torch.float64)
        k = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        v = torch.randn(3, 8, generator=gen, dtype=torch.float64)
        out, weights = attention(q, k, v)
        torch.testing.assert_close(out, _attention_loop(q, k, v), atol=1e-6, rtol=0)
        torch.testing.assert_close(weights.sum(-1), torch.ones_like(weights.sum(-1)))


def test_attention_shape_mismatch():
    with pytest.raises(ShapeError):
        attention(torch.randn(2, 4), torch.randn(3, 4), torch.randn(2, 4))


# ── Mixing ───────────────────────────────────────


def test_gated_fusion_at_zero_logit_is_average():
    block = _block()
    assert float(block.gate) == 0.5
    a, b = torch.randn(2, C, N_M, D), torch.randn(2, C, N_M, D)
    torch.testing.assert_close(block.gated_fusion(a, b, block.gate), (a + b) / 2)


def test_first_depth_uses_plm_features_as_memory():
    block = _block()
    z_plm = torch.randn(2, C, N_M, D)
    torch.testing.assert_close(block.mix(z_plm, None), block.mix(z_plm, z_plm))
    assert block.mix(z_plm, None).shape == z_plm.shape


def test_without_current_attention_memory_stream_passes_through():
    block = _block(use_current=False)
    z_plm, z_prev = torch.randn(2, C, N_M, D), torch.randn(2, C, N_M, D)
    torch.testing.assert_close(block.mix(z_plm, z_prev), block.memory_attention(z_plm, z_prev))


def test_without_memory_attention_current_stream_passes_through():
    block = _block(use_memory=False)
    z_plm, z_prev = torch.randn(2, C, N_M, D), torch.randn(2, C, N_M, D)
    torch.testing.assert_close(block.mix(z_plm, z_prev), block.current_attention(z_prev, z_plm))


def test_without_gating_beta_is_constant_half():
    block = _block(use_gating=False)
    assert "gate_logit" not in dict(block.named_parameters())
    assert float(block.gate) == 0.5


def test_mix_rejects_mismatched_memory():
    block = _block()
    with pytest.raises(ShapeError, match="Accumulated stream"):
        block.mix(torch.randn(1, C, N_M, D), torch.randn(1, C, N_M - 1, D))


# ── Cross attention ──────────────────────────────


def test_cross_adds_residual_to_ts_output():
    block = _block()
    ts_query, z_ts = torch.randn(2, C, N_P, D), torch.randn(2, C, N_P, D)
    z_mix = torch.randn(2, C, N_M, D)
    z_cross = block.cross(ts_query, z_ts, z_mix)
    torch.testing.assert_close(z_cross - z_ts, block.cross_model_attention(ts_query, z_mix))


@pytest.mark.parametrize("mode", ["sum", "concat", "attention"])
def test_baseline_fusion_modes_keep_ts_shape(mode):
    block = _block(fusion=mode)
    assert block.gate is None
    z_plm = torch.randn(2, C, N_M, D)
    assert torch.equal(block.mix(z_plm, None), z_plm)
    z_cross = block.cross(torch.randn(2, C, N_P, D), torch.randn(2, C, N_P, D), z_plm)
    assert z_cross.shape == (2, C, N_P, D)


def test_cmf_block_gradcheck():
    block = _block().double()
    z_plm = torch.randn(1, 2, N_M, D, dtype=torch.float64, requires_grad=True)
    z_prev = torch.randn(1, 2, N_M, D, dtype=torch.float64, requires_grad=True)
    ts_in = torch.randn(1, 2, N_P, D, dtype=torch.float64, requires_grad=True)

    def fused(z_plm, z_prev, ts_in):
        return block.cross(ts_in, ts_in, block.mix(z_plm, z_prev))

    assert gradcheck(fused, (z_plm, z_prev, ts_in), eps=1e-6, atol=1e-6, rtol=1e-4)


# ── Reductions ───────────────────────────────────


def test_sum_fusion_with_zero_projection_returns_ts_output():
    block = _block(fusion="sum")
    with torch.no_grad():
        block.feature_map.weight.zero_()
        block.feature_map.bias.zero_()
    z_ts = torch.randn(2, C, N_P, D)
    z_cross = block.cross(torch.randn(2, C, N_P, D), z_ts, torch.randn(2, C, N_M, D))
    assert torch.equal(z_cross, z_ts)


def test_attention_fusion_is_plain_cross_attention():
    block = _block(fusion="attention")
    ts_query, z_ts = torch.randn(2, C, N_P, D), torch.randn(2, C, N_P, D)
    z_plm = torch.randn(2, C, N_M, D)
    z_mix = block.mix(z_plm, torch.randn(2, C, N_M, D))
    assert torch.equal(z_mix, z_plm)
    expected = block.cross_model_attention(ts_query, z_plm) + z_ts
    assert torch.equal(block.cross(ts_query, z_ts, z_mix), expected)


def _tie(block: CMFBlock) -> CMFBlock:
    block.q_memory.weight = block.q_current.weight
    block.k_current.weight = block.k_memory.weight
    block.v_current.weight = block.v_memory.weight
    return block


def test_tied_current_attention_is_swapped_memory_attention():
    block = _tie(_block())
    a, b = torch.randn(2, C, N_M, D), torch.randn(2, C, N_M, D)
    torch.testing.assert_close(block.current_attention(a, b), block.memory_attention(b, a))


def test_tied_first_depth_streams_coincide():
    block = _tie(_block())
    z_plm = torch.randn(2, C, N_M, D)
    memory = block.memory_attention(z_plm, z_plm)
    torch.testing.assert_close(block.current_attention(z_plm, z_plm), memory)
    torch.testing.assert_close(block.mix(z_plm, None), memory)


def test_single_plm_token_attends_with_weight_one():
    torch.manual_seed(0)
    block = CMFBlock(
        ModelConfig(ts_width=D, ts_heads=2), plm_width=D, ts_width=D, plm_tokens=1, ts_tokens=N_P
    )
    z_plm, z_prev = torch.randn(2, C, 1, D), torch.randn(2, C, 1, D)
    torch.testing.assert_close(block.memory_attention(z_plm, z_prev), block.v_memory(z_prev))
    torch.testing.assert_close(block.current_attention(z_prev, z_plm), block.v_current(z_plm))

    z_mix = block.mix(z_plm, z_prev)
    cross = block.cross_model_attention(torch.randn(2, C, N_P, D), z_mix)
    torch.testing.assert_close(cross, block.v_cross(z_mix).expand(2, C, N_P, D))
