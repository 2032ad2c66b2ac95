import numpy as np
import pytest
from scipy.special import expit

from fedtate.domain import SiteDataset


def make_site(rng, n, site_id="T", shift=0.0, p=2, noise=2.0, effect=3.0):
    """Correctly specified linear outcome / logistic propensity site."""
    X = rng.normal(size=(n, p)) + shift
    A = rng.binomial(1, expit(X @ np.linspace(0.5, -0.5, p))).astype(float)
    beta = np.linspace(0.4, 1.2, p)
    y0 = X @ beta + rng.normal(0, noise, n)
    Y = np.where(A == 1, y0 + effect + X @ beta, y0)
    return SiteDataset(site_id, X, A, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
