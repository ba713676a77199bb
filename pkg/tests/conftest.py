import os

import numpy as np
import pytest

from facerender.data import synthesize_dataset
from facerender.train import TrainConfig, train_renderer_stage1, train_renderer_stage2


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny 32x32 dataset shared by unit, CLI, and service tests."""
    root = tmp_path_factory.mktemp("ds32")
    return synthesize_dataset(str(root), seed=101, n_train=5, n_val=2, n_test=1,
                              clip_length=36, size=32)


@pytest.fixture(scope="session")
def small_train_config():
    return TrainConfig(stage1_steps=150, stage2_steps=50, batch_size=4, seed=7,
                       image_size=32, window_len=9, base_channels=8, z_dim=64,
                       flow_steps=60, flow_batch=4, pair_min_gap=3)


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory, small_dataset, small_train_config):
    """A briefly trained renderer (stage 1 + 2) reused by CLI/service tests."""
    out = str(tmp_path_factory.mktemp("tinytrain"))
    r1 = train_renderer_stage1(small_train_config, small_dataset, out)
    r2 = train_renderer_stage2(small_train_config, small_dataset, out, r1.checkpoint_dir)
    return {"stage1": r1.checkpoint_dir, "stage2": r2.checkpoint_dir, "out": out}
