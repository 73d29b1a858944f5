"""The assembled forecaster: wiring, variants and the inference contract."""

import pytest
import torch

from plmcast.core.models import Branches
from plmcast.core.schemas import RunConfig
from plmcast.errors import ShapeError
from plmcast.model.backbone import load_backbone
from plmcast.model.network import DualBranchForecaster

C, F = 3, 8


def _model(cfg: RunConfig, **model_overrides) -> DualBranchForecaster:
    if model_overrides:
        cfg = cfg.with_overrides({"model": model_overrides})
    backbone = load_backbone(cfg.backbone) if cfg.has_plm else None
    text = torch.randn(C, cfg.text.max_tokens, 16) if cfg.has_plm and cfg.model.use_text else None
    torch.manual_seed(0)
    return DualBranchForecaster(cfg, C, F, backbone, text)


def _batch(batch: int = 4):
    torch.manual_seed(1)
    return torch.randn(batch, C, 32), torch.randn(batch, C), torch.rand(batch, C) + 0.5


def test_dual_branch_forward_shapes(stub_cfg):
    model = _model(stub_cfg)
    out = model(*_batch())
    assert out.y_ts.shape == (4, C, F)
    assert out.y_plm.shape == (4, C, F)
    assert out.global_map.shape == (4, C, C)
    assert len(out.features.z_plm) == model.depth == 2
    assert out.features.z_plm[0].shape == (4, C, model.plm.n_patches + 1, 16)
    assert len(out.features.z_chan) == 2
    assert torch.equal(out.prediction, out.y_ts)


def test_heads_are_denormalized(stub_cfg):
    model = _model(stub_cfg).eval()
    x, mean, std = _batch()
    out = model(x, mean, std)
    normalized = model.ts.forecast(out.features.z_cross[-1])
    torch.testing.assert_close(out.y_ts, normalized * std[..., None] + mean[..., None])


def test_eval_forward_is_deterministic_and_leaves_extractor(stub_cfg):
    model = _model(stub_cfg).eval()
    memory = model.plm.extractor.memory.detach().clone()
    x, mean, std = _batch()
    first = model(x, mean, std).prediction
    model.commit_extractor()
    assert torch.equal(first, model(x, mean, std).prediction)
    assert torch.equal(model.plm.extractor.memory, memory)


def test_ts_only_has_no_backbone(stub_cfg):
    cfg = stub_cfg.with_overrides({"model": {"branches": "ts_only"}})
    model = _model(cfg)
    assert model.plm is None and model.fusion is None
    assert not any(n.startswith("plm.") for n, _ in model.named_parameters())
    out = model(*_batch())
    assert out.y_plm is None and out.y_ts.shape == (4, C, F)


def test_plm_only_predicts_from_plm_head(stub_cfg):
    model = _model(stub_cfg.with_overrides({"model": {"branches": Branches.PLM_ONLY.value}}))
    assert model.ts is None
    out = model(*_batch())
    assert out.y_ts is None
    assert torch.equal(out.prediction, out.y_plm)


def test_without_channel_layer_tokens_are_patches_only(stub_cfg):
    model = _model(stub_cfg, use_channel_layer=False)
    out = model(*_batch())
    assert model.plm.extractor is None
    assert out.global_map is None
    assert out.features.z_plm[0].shape[-2] == model.plm.n_patches


def test_without_text_no_text_buffer(stub_cfg):
    model = _model(stub_cfg, use_text=False)
    assert model.plm.text_compressor is None
    assert model(*_batch()).y_ts.shape == (4, C, F)


def test_gates_reported_per_depth(stub_cfg):
    assert _model(stub_cfg).gates() == [0.5, 0.5]
    assert _model(stub_cfg, fusion="sum").gates() == []


def test_parallel_cross_feed_keeps_ts_path_unfused(stub_cfg):
    model = _model(stub_cfg, cross_feed="parallel").eval()
    x, mean, std = _batch()
    out = model(x, mean, std)
    tokens = model.ts.embed(x)
    for i in range(model.depth):
        tokens = model.ts.layer(i, tokens)
        torch.testing.assert_close(out.features.z_ts[i], tokens)


def test_wrong_window_shape(stub_cfg):
    model = _model(stub_cfg)
    with pytest.raises(ShapeError, match="Expected windows"):
        model(torch.randn(2, C, 16), torch.zeros(2, C), torch.ones(2, C))


def test_unshared_channel_blocks_are_copies(stub_cfg):
    model = _model(stub_cfg, shared_blocks=False)
    backbone = model.plm.backbone
    assert backbone.h_channel is not None
    assert backbone.channel_blocks[0] is not backbone.h[0]
    torch.testing.assert_close(
        backbone.channel_blocks[0].attn.c_attn.weight, backbone.h[0].attn.c_attn.weight
    )
