import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(f, arrays, step=1e-5):
    """Coordinate-wise central finite differences of f(*arrays) -> float.

    Returns one gradient array per input. Independent of any tape machinery:
    it only ever calls `f` on plain numpy arrays.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[k][idx] += step
            lo[k][idx] -= step
            g[idx] = (f(*hi) - f(*lo)) / (2 * step)
        grads.append(g)
    return grads


def directional_diff(f, arrays, direction, step=1e-5):
    """Central difference of f along one direction in the joint input space."""
    hi = [a + step * d for a, d in zip(arrays, direction)]
    lo = [a - step * d for a, d in zip(arrays, direction)]
    return (f(*hi) - f(*lo)) / (2 * step)


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom
