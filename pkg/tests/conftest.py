from __future__ import annotations

import numpy as np
import pytest

from src.data.manifest import DatasetManifest
from src.data.synthetic import SynthConfig, generate_synthetic_dataset
from src.models.config import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时较长的验收测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时较长，需要 --runslow 才会运行")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(classes=4, per_class=6, seed=7, performers=4, frames_min=12, frames_max=18,
                       image_width=96, image_height=80, focal=72.0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_synth_config) -> DatasetManifest:
    """4类 × 6个样本的合成数据集，整个测试会话共用一份（只读）。"""
    out_dir = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic_dataset(tiny_synth_config, out_dir)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        class_count=4,
        width_multiplier=1 / 16,
        clip_length=4,
        pose_stage_depths=[1, 1, 1, 1],
        ir_stage_depths=[1, 1, 1, 1],
        head_hidden=[16, 8],
        map_size=32,
        clip_size=32,
    )
