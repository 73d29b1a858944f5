"""Loss, parameter groups, the fit loop, inference and checkpoints."""

import dataclasses
from pathlib import Path

import pandas as pd
import pytest
import torch
from safetensors.torch import save_file
from torch.autograd import gradcheck

from plmcast.core.models import FreezeMode
from plmcast.core.schemas import RunConfig
from plmcast.errors import (
    CheckpointError,
    NumericalError,
    ShapeError,
    TrainingDivergedError,
    WindowError,
)
from plmcast.model.backbone import FreezePolicy, apply_freeze_policy
from plmcast.pipeline import (
    build_model,
    describe_channels,
    load_series,
    prepare_windows,
    split_series,
    train_horizon,
)
from plmcast.training import trainer
from plmcast.training.checkpoint import load_checkpoint, read_metadata, save_checkpoint
from plmcast.training.trainer import (
    build_parameter_groups,
    evaluate,
    fit,
    predict,
    total_loss,
)

F = 8


def _prepared(cfg: RunConfig):
    raw = load_series(cfg)
    splits = split_series(cfg, raw, F)
    windows = prepare_windows(cfg, splits, F)
    model = build_model(cfg, raw.n_channels, F, describe_channels(cfg, splits.train))
    return model, windows


def _batch(windows, n: int = 4):
    items = [windows[i] for i in range(n)]
    return [torch.stack([torch.from_numpy(item[k]) for item in items]) for k in range(4)]


# ── Loss ─────────────────────────────────────────


def test_loss_weighted_sum():
    y = torch.zeros(2, 3)
    loss = total_loss(torch.ones(2, 3), torch.full((2, 3), 0.5), y, 0.6)
    assert float(loss) == pytest.approx(0.8)


def test_loss_perfect_fit_is_zero():
    y = torch.randn(2, 3)
    assert float(total_loss(y.clone(), y.clone(), y, 0.6)) == 0.0


def test_loss_symmetry():
    y, a, b = torch.randn(3, 2, 5).unbind(0)
    torch.testing.assert_close(total_loss(a, b, y, 0.3), total_loss(b, a, y, 0.7))


def test_loss_weight_zero_ignores_plm_head():
    y = torch.zeros(2, 3)
    y_plm = torch.randn(2, 3, requires_grad=True)
    total_loss(y_plm, torch.randn(2, 3), y, 0.0).backward()
    assert torch.all(y_plm.grad == 0)


def test_loss_with_single_head():
    y = torch.zeros(2, 3)
    assert float(total_loss(None, torch.ones(2, 3), y, 0.6)) == 1.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError, match="ts forecast"):
        total_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 3), 0.5)


def test_loss_gradcheck():
    gen = torch.Generator().manual_seed(0)
    y = torch.randn(2, 3, 4, generator=gen, dtype=torch.float64)
    y_plm = (y + 0.5 + torch.rand(2, 3, 4, generator=gen, dtype=torch.float64)).requires_grad_()
    y_ts = (y - 0.5 - torch.rand(2, 3, 4, generator=gen, dtype=torch.float64)).requires_grad_()
    assert gradcheck(lambda a, b: total_loss(a, b, y, 0.6), (y_plm, y_ts), eps=1e-6, rtol=1e-4)


# ── Parameter groups ─────────────────────────────


def test_default_groups_freeze_backbone_weights(stub_cfg):
    model, _ = _prepared(stub_cfg)
    groups = build_parameter_groups(model, FreezeMode.DEFAULT)
    assert "plm.backbone.wte.weight" in groups.frozen
    assert "plm.backbone.h.0.attn.c_attn.weight" in groups.frozen
    assert "plm.backbone.wpe.weight" in groups.trainable
    assert "plm.backbone.h.1.ln_2.bias" in groups.trainable
    assert "plm.channel_embedding.weight" in groups.trainable
    assert "fusion.0.gate_logit" in groups.trainable
    assert all(name.startswith("plm.backbone.") for name in groups.frozen)
    audit = groups.audit()
    assert audit.total == sum(p.numel() for p in model.parameters())


def test_no_freeze_groups_have_nothing_frozen(stub_cfg):
    model, _ = _prepared(stub_cfg)
    assert build_parameter_groups(model, FreezeMode.NO_FREEZE).frozen == {}


def test_ts_only_groups_have_no_backbone(stub_cfg):
    model, _ = _prepared(stub_cfg.with_overrides({"model": {"branches": "ts_only"}}))
    groups = build_parameter_groups(model, FreezeMode.DEFAULT)
    assert groups.frozen == {}
    assert not any("backbone" in name for name in groups.trainable)


# ── Gradient flow ────────────────────────────────


@pytest.mark.parametrize(("weight", "silent_head"), [(1.0, "ts"), (0.0, "plm")])
def test_excluded_head_gets_zero_gradient(stub_cfg, weight, silent_head):
    cfg = stub_cfg.with_overrides({"model": {"cross_feed": "parallel"}})
    model, windows = _prepared(cfg)
    x, y, mean, std = _batch(windows.train)
    out = model(x, mean, std)
    total_loss(out.y_plm, out.y_ts, y, weight).backward()
    head = model.ts.head if silent_head == "ts" else model.plm.head
    other = model.plm.head if silent_head == "ts" else model.ts.head
    assert head.weight.grad is None or torch.all(head.weight.grad == 0)
    assert other.weight.grad is not None and other.weight.grad.abs().sum() > 0


# ── Fit ──────────────────────────────────────────


def test_fit_keeps_frozen_weights_and_updates_norms(stub_cfg):
    cfg = stub_cfg.with_overrides(
        {"train": {"epochs": 10, "patience": 10, "max_steps": 100, "learning_rate": 1e-2}}
    )
    model, windows = _prepared(cfg)
    frozen = apply_freeze_policy(model.plm.backbone, FreezePolicy.for_mode(cfg.train.freeze)).frozen
    before = {k: v.detach().clone() for k, v in model.plm.backbone.state_dict().items()}
    result = fit(model, windows.train, windows.val, cfg.train)
    after = model.plm.backbone.state_dict()

    assert result.steps == 100
    assert frozen
    for name in frozen:
        assert not model.plm.backbone.get_parameter(name).requires_grad, name
        assert torch.equal(before[name], after[name]), name
    assert not torch.equal(before["wpe.weight"], after["wpe.weight"])
    assert not torch.equal(before["h.0.ln_1.weight"], after["h.0.ln_1.weight"])


def test_fit_history_columns(stub_cfg):
    model, windows = _prepared(stub_cfg)
    result = fit(model, windows.train, windows.val, stub_cfg.train)
    assert list(result.history.columns) == ["epoch", "train_loss", "val_mse", "val_mae", "steps"]
    assert result.best_val_mse == result.history["val_mse"].min()
    assert result.parameters.frozen > 0


def test_fit_rejects_empty_validation(stub_cfg):
    model, windows = _prepared(stub_cfg)
    empty = dataclasses.replace(windows.val, origins=windows.val.origins[:0])
    with pytest.raises(WindowError):
        fit(model, windows.train, empty, stub_cfg.train)


def test_fit_reports_divergence(stub_cfg):
    model, windows = _prepared(stub_cfg)
    with torch.no_grad():
        model.ts.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        fit(model, windows.train, windows.val, stub_cfg.train)
    assert info.value.epoch == 1 and info.value.batch == 0
    assert "ts" in info.value.components


def test_fit_rejects_never_finite_validation(stub_cfg, monkeypatch):
    model, windows = _prepared(stub_cfg)
    nan = float("nan")
    monkeypatch.setattr(trainer, "evaluate", lambda *args, **kwargs: {"mse": nan, "mae": nan})
    with pytest.raises(NumericalError, match="never finite") as info:
        fit(model, windows.train, windows.val, stub_cfg.train)
    assert info.value.context["epochs"] >= 1


def test_identical_runs_identical_history(stub_cfg):
    raw = load_series(stub_cfg)
    a = train_horizon(stub_cfg, raw, F).result.history
    b = train_horizon(stub_cfg, raw, F).result.history
    pd.testing.assert_frame_equal(a, b, check_exact=False, atol=1e-6)


# ── Inference ────────────────────────────────────


def test_predict_is_ts_head_and_batch_consistent(stub_cfg):
    model, windows = _prepared(stub_cfg)
    model.eval()
    x, _, mean, std = _batch(windows.test)
    batched = predict(model, x, mean, std)
    with torch.no_grad():
        assert torch.equal(batched, model(x, mean, std).y_ts)
    single = predict(model, x[1], mean[1], std[1])
    torch.testing.assert_close(single, batched[1], atol=1e-6, rtol=0)
    assert torch.equal(predict(model, x, mean, std), batched)


# ── Checkpoints ──────────────────────────────────


def test_checkpoint_round_trip(stub_cfg, tmp_path: Path):
    model, windows = _prepared(stub_cfg)
    fit(model, windows.train, windows.val, stub_cfg.train)
    path = save_checkpoint(tmp_path / "model.safetensors", model, stub_cfg)

    metadata = read_metadata(path)
    assert metadata["config_hash"] == stub_cfg.config_hash()
    assert metadata["provenance"] == "stub"
    assert metadata["n_plm"] == "2"

    loaded, cfg = load_checkpoint(path)
    assert cfg == stub_cfg
    x, _, mean, std = _batch(windows.test)
    torch.testing.assert_close(
        predict(loaded, x, mean, std), predict(model, x, mean, std), atol=1e-6, rtol=0
    )
    assert evaluate(loaded, windows.test) == pytest.approx(evaluate(model, windows.test))


def test_checkpoint_missing_tensor_is_named(stub_cfg, tmp_path: Path):
    model, _ = _prepared(stub_cfg)
    good = save_checkpoint(tmp_path / "good.safetensors", model, stub_cfg)
    bad = tmp_path / "bad.safetensors"
    save_file({"unrelated": torch.zeros(1)}, str(bad), metadata=read_metadata(good))
    with pytest.raises(CheckpointError, match="lacks tensor"):
        load_checkpoint(bad)


def test_checkpoint_wrong_format(tmp_path: Path):
    path = tmp_path / "other.safetensors"
    save_file({"x": torch.zeros(1)}, str(path), metadata={"format": "something-else"})
    with pytest.raises(CheckpointError, match="not a plmcast checkpoint"):
        read_metadata(path)
