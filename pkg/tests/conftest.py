import numpy as np
import pytest

from deepf0 import model as M

# central differences cannot resolve derivatives much below the roundoff of
# the loss (~1e-10 absolute), so tiny gradients are compared absolutely
FD_STEP = 1e-6
FD_FLOOR = 1e-6


def rel_error(analytic, numeric, floor=FD_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, x, h=FD_STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of array ``x`` (mutated and restored)."""
    if indices is None:
        indices = list(np.ndindex(x.shape))
    out = []
    for idx in indices:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


SMALL_CONFIG = M.DeepF0Config(
    frame_length=64, channels=4, first_kernel=5, block_kernel=5, dilations=(1, 2, 4, 8), pool=16, bins=8
)


def randomized_params(config, seed, dtype=np.float64):
    """Parameters drawn uniformly from [-1, 1]: no exact zeros, so ReLU kinks are unlikely."""
    p = M.build(config, seed, dtype)
    rng = np.random.default_rng(seed + 1000)
    for t in p.tensors.values():
        t[...] = rng.uniform(-1, 1, t.shape)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
