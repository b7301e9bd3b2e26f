import numpy as np
import pytest

from fedprune.model import init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model([6, 10, 8, 7], vocab_size=12, seed=0)


@pytest.fixture
def token_batch(rng):
    return rng.integers(0, 12, size=(6, 8))
