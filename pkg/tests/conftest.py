import numpy as np
import pytest

from cfst import nn


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


def fd_param_grads(loss_fn, params, h=1e-5):
    """Central finite differences of a scalar loss over parameter arrays."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        grads.append(g)
    return grads


def fd_array_grad(loss_fn, arr, h=1e-5):
    """Central finite differences over one mutable array (e.g. inputs)."""
    return fd_param_grads(loss_fn, [arr], h)[0]


def assert_grads_match(analytic, numeric, tol=1e-4):
    worst = max(rel_err(a, f) for a, f in zip(analytic, numeric))
    assert worst < tol, f"worst gradient relative error {worst}"


@pytest.fixture
def rng():
    return nn.make_rng(1234)


def random_small_model(rng, max_dim=8, dropout_p=0.0):
    """Up to three weight layers, dims <= max_dim."""
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, max_dim + 1)) for _ in range(depth + 1)]
    return nn.init_mlp(dims, rng, dropout_p=dropout_p)
