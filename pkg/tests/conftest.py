"""Shared fixtures: a tiny stub-backbone configuration on synthetic data."""

import json
from pathlib import Path

import pytest
import torch

from plmcast.core.schemas import RunConfig
from plmcast.data.synthetic import SyntheticSpec, generate
from plmcast.model.backbone import load_backbone

STUB_CONFIG = {
    "data": {"input_length": 32, "horizons": [8], "synthetic": {"rows": 600}},
    "text": {"max_tokens": 128},
    "backbone": {"arch": "stub", "provenance": "stub", "n_plm": 2, "width": 16, "heads": 2},
    "model": {"patch_size": 8, "patch_stride": 4, "ts_width": 16, "ts_heads": 2},
    "train": {"epochs": 2, "batch_size": 16, "max_steps": 12, "patience": 2},
}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def stub_cfg(tmp_path: Path) -> RunConfig:
    return RunConfig.model_validate({**STUB_CONFIG, "output_dir": str(tmp_path / "run")})


@pytest.fixture
def stub_backbone(stub_cfg: RunConfig):
    return load_backbone(stub_cfg.backbone)


@pytest.fixture
def synthetic_series():
    return generate(SyntheticSpec(rows=600))


@pytest.fixture
def stub_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "run.json"
    path.write_text(json.dumps({**STUB_CONFIG, "output_dir": str(tmp_path / "run")}))
    return path
