import numpy as np
import pytest

from npaft import ColumnSpec, CovariateSchema, EncodedDataset


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


@pytest.fixture
def simple_schema():
    return CovariateSchema([
        ColumnSpec("age", "continuous"),
        ColumnSpec("sex", "binary"),
        ColumnSpec("stage", "categorical", ("I", "II", "III")),
    ])


def make_dataset(n=60, p=3, seed=1, censor_frac=0.0, effect=0.4, noise=0.6):
    """Small synthetic cohort with lognormal times."""
    g = np.random.default_rng(seed)
    X = g.standard_normal((n, p))
    a = g.integers(0, 2, n)
    log_t = 1.5 + effect * a + 0.5 * X[:, 0] + g.normal(0.0, noise, n)
    t = np.exp(log_t)
    if censor_frac > 0:
        c = np.quantile(t, 1.0 - censor_frac) * g.uniform(0.4, 1.4, n)
        y = np.minimum(t, c)
        delta = (t <= c).astype(int)
    else:
        y, delta = t, np.ones(n, dtype=int)
    return EncodedDataset.from_arrays(y, delta, a, X)


@pytest.fixture
def small_data():
    return make_dataset()
