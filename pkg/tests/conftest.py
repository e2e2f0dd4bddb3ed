import numpy as np
import pytest

from matkv.model import ModelConfig, build_model

TINY = ModelConfig(
    n_layers=2, n_heads=2, head_dim=8, vocab_size=256, ffn_dim=32, seed=7,
    max_position=512,
)


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
