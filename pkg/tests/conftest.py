import sys

import numpy as np
import pytest

from prefbandit import Instance


def random_instance(rng, nx=2, na=4, d=3, gamma=0.7, R=3.0, p=2.0, tabular=False):
    if tabular:
        feats = np.tile(np.eye(na)[None], (nx, 1, 1))
        d = na
    else:
        feats = rng.standard_normal((nx, na, d))
        feats /= np.maximum(np.linalg.norm(feats, axis=2, keepdims=True), 1.0)
    base = rng.dirichlet(np.ones(na), size=nx)
    ctx = rng.dirichlet(np.ones(nx))
    theta = rng.standard_normal(d)
    nrm = np.sum(np.abs(theta) ** p) ** (1 / p)
    theta *= min(1.0, 0.9 * R / nrm)
    return Instance(ctx, feats, base, gamma, R, p, theta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def inst(rng):
    return random_instance(rng)


@pytest.fixture
def tab_inst(rng):
    return random_instance(rng, nx=1, na=4, tabular=True)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(mod.RESULTS, key=lambda k: int(k[1:])):
            terminalreporter.write_line(mod.RESULTS[key])
