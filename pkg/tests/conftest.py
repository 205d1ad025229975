import numpy as np
import pytest


@pytest.fixture
def rs():
    return np.random.default_rng(12345)
