import numpy as np
import pytest

from uad import kernels


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    # compile once up front so timing-sensitive tests measure work, not the JIT
    kernels.warmup()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
