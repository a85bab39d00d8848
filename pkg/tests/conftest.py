import pytest
import torch

from sgplvm.core.config import InferConfig, ModelConfig, TrainConfig
from tests.factories import random_model


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def model():
    """Trained-flagged random iid model with tied spatial inducing inputs."""
    return random_model(seed=3)


@pytest.fixture
def model_cfg():
    return ModelConfig(d_xi=2, m_xi=4, spatial_family="matern32", beta_init=20.0)


@pytest.fixture
def train_cfg():
    return TrainConfig(optimizer="lbfgs", max_iters=15, fixed_beta_iters=3, seed=0)


@pytest.fixture
def infer_cfg():
    return InferConfig(max_iters=30, restarts=2, n_mog=4, seed=0)
