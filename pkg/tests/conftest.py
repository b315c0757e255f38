from __future__ import annotations

import numpy as np
import pytest

from snmnet import linalg


@pytest.fixture(params=linalg.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    previous = linalg.BACKEND
    linalg.use_backend(request.param)
    yield request.param
    linalg.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
