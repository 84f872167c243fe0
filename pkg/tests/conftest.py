import numpy as np
import pytest
from scipy.special import expit

from drcalib import BasisSpec, Dataset, build_basis, fit_logistic_mle


def make_instance(rng, n=120, L=2, slopes=None, mean_shift=1.0, outcome_beta=None):
    """Random feasible instance: MAR logistic response, linear-plus-noise outcome.

    Returns (dataset, basis, design). L raw covariates enter both the basis
    and the propensity design, so calibration is feasible with high
    probability for moderate L.
    """
    x = np.column_stack([rng.uniform(0, 2, n)] + [rng.standard_normal(n) for _ in range(L - 1)])
    design = np.column_stack([np.ones(n), x])
    slopes = np.full(L, 0.5) if slopes is None else np.asarray(slopes)
    pi = expit(-0.3 + x @ slopes)
    delta = rng.binomial(1, pi)
    if delta.sum() < L + 3 or delta.sum() == n:
        flip = rng.choice(n, size=L + 3, replace=False)
        delta[flip] = 1
        delta[rng.integers(n)] = 0
    beta = np.arange(1, L + 2, dtype=float) if outcome_beta is None else np.asarray(outcome_beta)
    y_full = mean_shift * beta[0] + x @ beta[1:] + rng.standard_normal(n)
    y = np.where(delta == 1, y_full, np.nan)
    ds = Dataset(x, delta, y)
    basis = build_basis(ds, BasisSpec.default(L))
    return ds, basis, design


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def instance(rng):
    ds, basis, design = make_instance(rng, n=300, L=2)
    fit = fit_logistic_mle(ds, design)
    return ds, basis, design, fit
