import numpy as np
import pytest

from mildhjb.apps import build_neumann_instance
from mildhjb.hjb import GridSpec, solve_mild_hjb
from mildhjb.model import build_model


def heat_model(n=8, lam=1.0, sigma=1.0, m=2):
    k = np.arange(n, dtype=float)
    mu = k**2
    rng = np.random.default_rng(11)
    L = rng.normal(size=(n, m)) / np.sqrt(1 + mu)[:, None]
    return build_model(mu, np.full(n, sigma), (1 + mu) ** 0.3, L, beta=0.3, lam=lam, p=2.0)


@pytest.fixture(scope="session")
def heat8():
    return heat_model()


@pytest.fixture(scope="session")
def neumann():
    return build_neumann_instance(d=1, N=8)


@pytest.fixture(scope="session")
def solved(neumann):
    """Solved 1-D Neumann value field (about ten seconds)."""
    return solve_mild_hjb(neumann.model, neumann.cost, GridSpec())
