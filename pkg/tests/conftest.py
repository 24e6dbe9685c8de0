import numpy as np
import pytest

from tinfer import kernels
from tinfer.model import ModelConfig, init_random
from tinfer.tensor import DType


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile every jit kernel once so individual tests time only themselves
    kernels.warmup()


def tiny_config(**overrides) -> ModelConfig:
    """1-layer minimum model from the forward-oracle example."""
    base = dict(vocab_size=8, hidden_size=4, num_layers=1, num_heads=1,
                head_dim=4, ffn_size=8, max_position=32, dtype=DType.F32,
                eos_token=1, pad_token=2)
    base.update(overrides)
    return ModelConfig(**base)


def small_config(**overrides) -> ModelConfig:
    """2-layer desk-test model, big enough for stable half-precision checks."""
    base = dict(vocab_size=64, hidden_size=32, num_layers=2, num_heads=2,
                head_dim=16, ffn_size=64, max_position=64, dtype=DType.F32,
                eos_token=1, pad_token=2)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_model():
    return init_random(tiny_config(), seed=7)


@pytest.fixture(scope="session")
def small_model():
    return init_random(small_config(), seed=7)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
