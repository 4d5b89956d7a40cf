import numpy as np
import pytest
import torch

from vidmil.data import SyntheticDatasetConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def tiny_bags():
    """40 short feature clips over 3 classes; enough for split and training smoke tests."""
    return generate_dataset(SyntheticDatasetConfig(
        num_videos=40, frames_per_video=10, num_classes=3, feature_dim=8, seed=3,
    ))
