"""Dual-branch loss, parameter groups, the training loop and inference."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import structlog
import torch
from torch import nn
from torch.utils.data import DataLoader

from plmcast.core.models import FreezeMode
from plmcast.core.schemas import ParameterAudit, TrainConfig
from plmcast.data.dataset import WindowSet
from plmcast.errors import (
    FreezePolicyError,
    NumericalError,
    ShapeError,
    TrainingDivergedError,
    WindowError,
)
from plmcast.evaluation.metrics import mae, mse
from plmcast.model.backbone import FreezePolicy, apply_freeze_policy
from plmcast.model.network import DualBranchForecaster

logger = structlog.get_logger()

BACKBONE_PREFIX = "plm.backbone."
HISTORY_COLUMNS = ["epoch", "train_loss", "val_mse", "val_mae", "steps"]


def branch_losses(
    y_plm: torch.Tensor | None, y_ts: torch.Tensor | None, y: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Mean absolute error of each head that is present."""
    terms: dict[str, torch.Tensor] = {}
    for name, pred in (("plm", y_plm), ("ts", y_ts)):
        if pred is None:
            continue
        if pred.shape != y.shape:
            raise ShapeError(f"{name} forecast {tuple(pred.shape)} vs target {tuple(y.shape)}")
        terms[name] = (pred - y).abs().mean()
    if not terms:
        raise ShapeError("No forecast to score")
    return terms


def combine(terms: dict[str, torch.Tensor], loss_weight: float) -> torch.Tensor:
    if "plm" not in terms:
        return terms["ts"]
    if "ts" not in terms:
        return terms["plm"]
    return loss_weight * terms["plm"] + (1 - loss_weight) * terms["ts"]


def total_loss(
    y_plm: torch.Tensor | None,
    y_ts: torch.Tensor | None,
    y: torch.Tensor,
    loss_weight: float,
) -> torch.Tensor:
    """``λ·L1(ŷ_plm) + (1-λ)·L1(ŷ_ts)``; a missing head leaves the other term alone."""
    return combine(branch_losses(y_plm, y_ts, y), loss_weight)


@dataclass
class ParameterGroups:
    trainable: dict[str, nn.Parameter] = field(default_factory=dict)
    frozen: dict[str, nn.Parameter] = field(default_factory=dict)

    def audit(self) -> ParameterAudit:
        trainable = sum(p.numel() for p in self.trainable.values())
        frozen = sum(p.numel() for p in self.frozen.values())
        return ParameterAudit(total=trainable + frozen, trainable=trainable, frozen=frozen)


def build_parameter_groups(model: DualBranchForecaster, freeze: FreezeMode) -> ParameterGroups:
    """Backbone parameters follow the freeze policy; everything else trains.

    Parameters that opt out of gradients themselves (a constant extractor) land in
    the frozen group.
    """
    backbone_split: dict[str, bool] = {}
    if model.plm is not None:
        partition = apply_freeze_policy(model.plm.backbone, FreezePolicy.for_mode(freeze))
        backbone_split = {BACKBONE_PREFIX + n: True for n in partition.trainable}
        backbone_split |= {BACKBONE_PREFIX + n: False for n in partition.frozen}

    groups = ParameterGroups()
    named = dict(model.named_parameters())
    for name, param in named.items():
        if name.startswith(BACKBONE_PREFIX):
            if name not in backbone_split:
                raise FreezePolicyError(f"Backbone parameter {name} was not classified")
            trainable = backbone_split[name]
        else:
            trainable = param.requires_grad
        (groups.trainable if trainable else groups.frozen)[name] = param

    if len(groups.trainable) + len(groups.frozen) != len(named):
        raise FreezePolicyError("Parameter groups do not cover the model")
    audit = groups.audit()
    logger.info("parameter_groups", **audit.model_dump())
    return groups


def window_loader(
    windows: WindowSet, batch_size: int, shuffle: bool = False, seed: int = 0
) -> DataLoader:
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        windows,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        drop_last=False,
        num_workers=0,
    )


@torch.no_grad()
def forecast(
    model: DualBranchForecaster, windows: WindowSet, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and targets over every window, each (n, C, F)."""
    model.eval()
    preds, targets = [], []
    for x, y, mean, std in window_loader(windows, batch_size):
        preds.append(model(x, mean, std).prediction.double().numpy())
        targets.append(y.double().numpy())
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model: DualBranchForecaster, windows: WindowSet, batch_size: int = 256) -> dict[str, float]:
    pred, true = forecast(model, windows, batch_size)
    return {"mse": mse(pred, true), "mae": mae(pred, true)}


@torch.no_grad()
def predict(
    model: DualBranchForecaster, x_norm: torch.Tensor, mean: torch.Tensor, std: torch.Tensor
) -> torch.Tensor:
    """Inference forecast (the time-series head). Accepts one window or a batch."""
    single = x_norm.dim() == 2
    if single:
        x_norm, mean, std = x_norm.unsqueeze(0), mean.unsqueeze(0), std.unsqueeze(0)
    model.eval()
    y = model(x_norm, mean, std).prediction
    return y.squeeze(0) if single else y


@dataclass
class FitResult:
    history: pd.DataFrame
    best_epoch: int
    best_val_mse: float
    steps: int
    parameters: ParameterAudit


def fit(
    model: DualBranchForecaster,
    train: WindowSet,
    val: WindowSet,
    cfg: TrainConfig,
) -> FitResult:
    """Train with Adam, pick the epoch with the lowest validation MSE, restore it."""
    if len(train) == 0 or len(val) == 0:
        raise WindowError("Training and validation sets must both be non-empty")

    groups = build_parameter_groups(model, cfg.freeze)
    optimizer = torch.optim.Adam(
        groups.trainable.values(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    loader = window_loader(train, cfg.batch_size, shuffle=cfg.shuffle, seed=cfg.seed)

    rows: list[dict[str, float]] = []
    best_mse, best_epoch, best_state = float("inf"), 0, None
    stale, steps = 0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses: list[float] = []
        for batch, (x, y, mean, std) in enumerate(loader):
            out = model(x, mean, std)
            terms = branch_losses(out.y_plm, out.y_ts, y)
            loss = combine(terms, cfg.loss_weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    epoch, batch, {k: v.item() for k, v in terms.items()} | {"total": loss.item()}
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.commit_extractor()
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break

        scores = evaluate(model, val)
        rows.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_mse": scores["mse"],
                "val_mae": scores["mae"],
                "steps": steps,
            }
        )
        logger.info("epoch_finished", **rows[-1])

        if scores["mse"] < best_mse:
            best_mse, best_epoch, stale = scores["mse"], epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("early_stop", epoch=epoch, best_epoch=best_epoch)
                break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break

    if best_state is None:
        raise NumericalError("Validation MSE was never finite", epochs=len(rows))
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(
        history=pd.DataFrame(rows, columns=HISTORY_COLUMNS),
        best_epoch=best_epoch,
        best_val_mse=best_mse,
        steps=steps,
        parameters=groups.audit(),
    )
