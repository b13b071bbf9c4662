import sys

import numpy as np
import pytest
from hypothesis import settings

from mohr import kernels
from mohr.model import ModelParams
from mohr.training import Batches, gradients, total_objective

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def random_params(rng, n_users=4, n_items=9, n_relations=3, dim=6, scale=0.5, dtype=np.float64, **flags):
    """Float64 params with nonzero biases, everything well inside the unit ball."""
    return ModelParams(
        user_vecs=rng.uniform(-scale, scale, (n_users, dim)) / np.sqrt(dim),
        item_vecs=rng.uniform(-scale, scale, (n_items, dim)) / np.sqrt(dim),
        rel_vecs=rng.uniform(-scale, scale, (n_relations + 1, dim)) / np.sqrt(dim),
        item_bias=rng.normal(0.0, 0.5, n_items),
        rel_bias=rng.normal(0.0, 0.5, n_relations + 1),
        **flags,
    ).astype(dtype)


def random_batches(rng, p, n=7):
    nu, ni, nr = p.n_users, p.n_items, p.n_relations
    seq = np.stack([rng.integers(nu, size=n), rng.integers(ni, size=n),
                    rng.integers(ni, size=n), rng.integers(ni, size=n)], 1)
    items = np.stack([rng.integers(ni, size=n), rng.integers(1, nr + 1, size=n),
                      rng.integers(ni, size=n), rng.integers(ni, size=n)], 1)
    rp = rng.integers(nr + 1, size=n)
    rn = (rp + rng.integers(1, nr + 1, size=n)) % (nr + 1)
    rels = np.stack([rng.integers(nu, size=n), rng.integers(ni, size=n), rp, rn], 1)
    return Batches(seq, items, rels)


def fd_mismatches(p, h, b, on_scores, eps=1e-4, rtol=1e-4, atol=1e-7):
    grad, _ = gradients(p, h, b, on_scores)
    bad = []
    for name, a in p.arrays().items():
        ga = getattr(grad, name)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            fp = total_objective(p, h, b, on_scores)
            a[idx] = old - eps
            fm = total_objective(p, h, b, on_scores)
            a[idx] = old
            num = (fp - fm) / (2 * eps)
            err = abs(num - ga[idx])
            if err > atol and err > rtol * abs(num):
                bad.append((name, idx, num, ga[idx]))
    return bad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
