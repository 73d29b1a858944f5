"""Self-describing model checkpoints: named tensors plus JSON metadata."""

from __future__ import annotations

import json
from pathlib import Path

import structlog
import torch
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from plmcast.core.schemas import RunConfig
from plmcast.errors import CheckpointError
from plmcast.model.backbone import backbone_from_config
from plmcast.model.network import DualBranchForecaster

logger = structlog.get_logger()

FORMAT = "plmcast-checkpoint/1"
TEXT_KEY = "plm.text_embedding"


def save_checkpoint(path: Path, model: DualBranchForecaster, cfg: RunConfig) -> Path:
    tensors = {k: v.detach().cpu().clone().contiguous() for k, v in model.state_dict().items()}
    backbone = model.plm.backbone if model.plm is not None else None
    metadata = {
        "format": FORMAT,
        "config": cfg.model_dump_json(),
        "config_hash": cfg.config_hash(),
        "provenance": str(cfg.backbone.provenance),
        "n_plm": str(model.depth),
        "freeze": str(cfg.train.freeze),
        "n_channels": str(model.n_channels),
        "horizon": str(model.horizon),
        "input_length": str(model.input_length),
        "backbone_config": backbone.config.to_json_string() if backbone is not None else "",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=metadata)
    logger.info("checkpoint_saved", path=str(path), tensors=len(tensors))
    return path


def read_metadata(path: Path) -> dict[str, str]:
    if not Path(path).is_file():
        raise CheckpointError(f"Checkpoint not found: {path}", path=str(path))
    try:
        with safe_open(str(path), framework="pt") as f:
            metadata = f.metadata() or {}
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}", path=str(path)) from e
    if metadata.get("format") != FORMAT:
        raise CheckpointError(
            f"{path} is not a plmcast checkpoint (format={metadata.get('format')!r})",
            path=str(path),
        )
    return metadata


def load_checkpoint(path: Path) -> tuple[DualBranchForecaster, RunConfig]:
    """Rebuild the model skeleton from metadata and load every tensor, shape-checked."""
    metadata = read_metadata(path)
    cfg = RunConfig.model_validate_json(metadata["config"])
    tensors = load_file(str(path))

    backbone = None
    if metadata["backbone_config"]:
        backbone = backbone_from_config(
            json.loads(metadata["backbone_config"]), cfg.backbone.provenance, cfg.backbone.causal
        )
    text = tensors.get(TEXT_KEY)
    model = DualBranchForecaster(
        cfg,
        n_channels=int(metadata["n_channels"]),
        horizon=int(metadata["horizon"]),
        backbone=backbone,
        text_embedding=torch.zeros_like(text) if text is not None else None,
    )

    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in tensors:
            raise CheckpointError(f"Checkpoint {path} lacks tensor {name}", tensor=name)
        if tensors[name].shape != tensor.shape:
            raise CheckpointError(
                f"Tensor {name} has shape {tuple(tensors[name].shape)}, "
                f"expected {tuple(tensor.shape)}",
                tensor=name,
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointError(f"Checkpoint {path} has unexpected tensor {extra[0]}", tensor=extra[0])

    model.load_state_dict(tensors)
    model.eval()
    logger.info("checkpoint_loaded", path=str(path), config_hash=metadata["config_hash"])
    return model, cfg
