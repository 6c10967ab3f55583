import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adlda import tensor as T
from adlda._accel import HAVE_NUMBA, backend

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = [pytest.param(True, id="numba", marks=pytest.mark.skipif(not HAVE_NUMBA, reason="numba missing")),
            pytest.param(False, id="numpy")]


@pytest.fixture(params=BACKENDS)
def kernel_backend(request):
    with backend(request.param):
        yield request.param


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield
