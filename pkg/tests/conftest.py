import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dtnet import tensor as T  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def randomize_bn(module, rng):
    """Give every batchnorm random affine params and running stats."""
    from dtnet.layers import BatchNorm

    for m in module.modules():
        if isinstance(m, BatchNorm):
            C = m.gamma.shape[0]
            m.gamma.data[:] = rng.uniform(0.5, 1.5, C)
            m.beta.data[:] = rng.normal(0, 0.3, C)
            m.running_mean[:] = rng.normal(0, 0.3, C)
            m.running_var[:] = rng.uniform(0.5, 1.5, C)


def mlp_params(mlp):
    bn = mlp.bn
    return mlp.linear.W.data, bn.running_mean, bn.running_var, bn.gamma.data, bn.beta.data
