import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("vitapes", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "vitapes"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["python", "cython"])
def backend(request):
    """Run a test once per kernel backend (skips cython if the extension is absent)."""
    from vitapes import kernels

    if request.param == "cython":
        pytest.importorskip("vitapes._ckernels")
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)
