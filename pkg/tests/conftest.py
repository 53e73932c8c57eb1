import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from crossprompt.data import SyntheticSpec, generate_synthetic
from crossprompt.training import TrainConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_dataset():
    """Small, clearly separable synthetic dataset for fast training tests."""
    spec = SyntheticSpec(
        n_samples=96,
        num_classes=2,
        latent_dim=4,
        feature_dims={"a": 8, "t": 8, "v": 8},
        snr={"a": 8.0, "t": 2.0, "v": 0.5},
        class_sep=4.0,
        seed=11,
    )
    return generate_synthetic(spec)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        epochs_stage1=3,
        epochs_stage2=2,
        batch_n=16,
        d=8,
        p=4,
        c=4,
        num_blocks=2,
        m_msa=1,
        heads=2,
        dropout_pg=0.0,
        mr=0.2,
        seed=3,
    )
