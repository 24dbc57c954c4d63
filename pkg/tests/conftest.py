import numpy as np
import pytest

from neural_flows.autograd import Tape, Tensor, backward


def fd_grad(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn`` with respect to array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def ad_grad(fn, x):
    """Reverse-mode gradient of ``fn(Tensor) -> scalar Tensor`` at ``x``."""
    p = Tensor(np.array(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        out = fn(p)
    return backward(tape, out, [p])[p]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
