import numpy as np
import pytest

from motionflow import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture(autouse=True)
def _no_numpy_global_state():
    # Nothing in the package may touch numpy's legacy global RNG; seed it to a
    # sentinel and verify the state is untouched after each test.
    np.random.seed(987654321)
    before = np.random.get_state()[1][:10].copy()
    yield
    after = np.random.get_state()[1][:10]
    assert np.array_equal(before, after), "test leaked use of np.random global state"
