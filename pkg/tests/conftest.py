import numpy as np
import pytest

from dyrex import backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["ext", "py"])
def each_backend(request):
    """Run a test under both kernel backends (ext skipped when not built)."""
    try:
        previous = backend.use(request.param)
    except Exception:
        pytest.skip("compiled kernels not available")
    yield request.param
    backend.use(previous)
