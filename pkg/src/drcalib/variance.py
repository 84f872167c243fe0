"""Plug-in influence-function variance estimation for the calibrated estimators.

Population expectations in the nuisance-coefficient definitions are replaced
by empirical means at the plug-in parameters, and the centering constant by
the point estimate itself; only the centered variance is consumed downstream.
Linear systems with condition number above 1e10 raise SingularSystem instead
of being silently regularized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BasisMatrix, Dataset
from .errors import SingularSystem
from .gamma import GammaFit
from .propensity import PropensityFit, h_values, logit_gradients

COND_LIMIT = 1e10


@dataclass(frozen=True)
class InfluenceVector:
    """Per-observation linearization terms and the nuisance coefficients used."""

    values: np.ndarray
    variant: str  # "T1" (plain augmented weights) | "T2" (robust weights)
    kappa: np.ndarray
    mu: np.ndarray | None = None
    zeta: np.ndarray | None = None
    nu: float | None = None


def _solve_checked(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystem(float(cond))
    return np.linalg.solve(a, rhs)


def solve_kappa_t1(
    dataset: Dataset,
    basis: BasisMatrix,
    fit: PropensityFit,
    lam: np.ndarray,
    beta: np.ndarray,
) -> np.ndarray:
    """Nuisance coefficient for the propensity-estimation effect.

    Solves sum_i delta_i (1/pi_i - 1) [e^{b_i'lam} (y_i - b_i'beta) - h_i'kappa] xt_i = 0,
    linear in kappa: A kappa = c with A = sum delta (1/pi - 1) xt h' and
    c = sum delta (1/pi - 1) e^{b'lam} (y - b'beta) xt.
    """
    mask = dataset.respondent_mask
    xt = logit_gradients(fit)[mask]
    h = h_values(fit)[mask]
    d1 = fit.dhat()[mask] - 1.0
    g = np.exp(basis.values[mask] @ lam)
    r = dataset.outcome[mask] - basis.values[mask] @ beta
    a = (xt * d1[:, None]).T @ h
    c = xt.T @ (d1 * g * r)
    return _solve_checked(a, c)


def influence_t1(
    dataset: Dataset,
    basis: BasisMatrix,
    fit: PropensityFit,
    lam: np.ndarray,
    beta: np.ndarray,
    kappa: np.ndarray,
    theta_hat: float,
) -> InfluenceVector:
    """eta_i = b_i'beta - theta + delta_i w_i (y_i - b_i'beta) + (1 - delta_i/pi_i) h_i'kappa

    with every unknown replaced by its plug-in value; values are uncentered.
    """
    delta = dataset.delta.astype(float)
    d = fit.dhat()
    omega = 1.0 + (d - 1.0) * np.exp(basis.values @ lam)
    pred = basis.values @ beta
    resid = np.where(delta == 1, np.nan_to_num(dataset.outcome - pred), 0.0)
    hk = h_values(fit) @ kappa
    values = pred - theta_hat + delta * omega * resid + (1.0 - delta * d) * hk
    return InfluenceVector(values, "T1", np.asarray(kappa, dtype=float))


def variance_t1(influence: InfluenceVector) -> float:
    """n^-2 sum_i (eta_i - mean eta)^2."""
    v = influence.values
    n = v.shape[0]
    return float(np.sum((v - v.mean()) ** 2)) / n**2


def _gamma_blocks(dataset: Dataset, basis: BasisMatrix, fit: GammaFit, dhat: np.ndarray):
    """Respondent-level pieces shared by the robust-fit nuisance systems."""
    mask = dataset.respondent_mask
    b = basis.values[mask]
    y = dataset.outcome[mask]
    r = y - b @ fit.beta
    g = np.exp(b @ fit.lam)
    adj = np.maximum(np.asarray(dhat, dtype=float)[mask] - 1.0, 0.0)
    w = adj * g * fit.q
    c = fit.sigma2 / (1.0 + fit.gamma)
    return b, y, r, w, c


def solve_nuisance_t2(
    dataset: Dataset,
    basis: BasisMatrix,
    fit: GammaFit,
    dhat: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Coefficients (mu, zeta, nu) removing the (lambda, beta, sigma^2) estimation effects.

    Builds the empirical Jacobian blocks of the decorated estimator functional
    with respect to (lambda, beta, sigma^2) and solves the stacked
    (2L+3)-dimensional system [s_k1 s_k2 s_k3] (mu, zeta, nu) = -s_k0.
    """
    b, y, r, w, c = _gamma_blocks(dataset, basis, fit, dhat)
    gam, s2 = fit.gamma, fit.sigma2
    r2 = r * r
    sig_term = r2 - c  # the sigma^2 estimating-equation factor

    s10 = b.T @ (w * y)
    s11 = -(b * w[:, None]).T @ b
    s12 = (b * (w * r)[:, None]).T @ b
    s13 = b.T @ (w * sig_term)

    a2 = gam / s2
    s20 = b.T @ (w * a2 * r * y)
    s21 = -(b * (w * a2 * r)[:, None]).T @ b
    s22 = (b * (w * (a2 * r2 - 1.0))[:, None]).T @ b
    # Exact derivative of the sigma^2 block in beta: the redescending factor
    # and the residual both carry beta.
    s23 = b.T @ (w * r * (a2 * sig_term - 2.0))

    a3 = gam / (2.0 * s2 * s2)
    s30 = float(np.sum(w * a3 * r2 * y))
    s31 = -(b.T @ (w * a3 * r2))
    s32 = b.T @ (w * a3 * r2 * r)
    s33 = float(np.sum(w * (a3 * r2 * sig_term - 1.0 / (1.0 + gam))))

    L1 = basis.size
    dim = 2 * L1 + 1
    a = np.zeros((dim, dim))
    a[:L1, :L1] = s11
    a[:L1, L1 : 2 * L1] = s12
    a[:L1, -1] = s13
    a[L1 : 2 * L1, :L1] = s21
    a[L1 : 2 * L1, L1 : 2 * L1] = s22
    a[L1 : 2 * L1, -1] = s23
    a[-1, :L1] = s31
    a[-1, L1 : 2 * L1] = s32
    a[-1, -1] = s33
    rhs = -np.concatenate([s10, s20, [s30]])
    sol = _solve_checked(a, rhs)
    return sol[:L1], sol[L1 : 2 * L1], float(sol[-1])


def theta_gamma_functional(
    dataset: Dataset,
    basis: BasisMatrix,
    dhat: np.ndarray,
    gamma: float,
    lam: np.ndarray,
    beta: np.ndarray,
    sigma2: float,
    mu: np.ndarray,
    zeta: np.ndarray,
    nu: float,
) -> float:
    """Decorated estimator: the weighted mean minus mu' (calibration gap) plus
    zeta' (beta equation) plus nu (sigma^2 equation), all at the given parameters.

    Its gradient in (lambda, beta, sigma^2) is n^-1 (s_k0 + s_k1 mu + s_k2 zeta
    + s_k3 nu); the decoration vanishes at the fitted values.
    """
    mask = dataset.respondent_mask
    b = basis.values[mask]
    y = dataset.outcome[mask]
    n = basis.n
    adj = np.maximum(np.asarray(dhat, dtype=float)[mask] - 1.0, 0.0)
    r = y - b @ beta
    w = adj * np.exp(b @ lam) * np.exp(-0.5 * gamma * r * r / sigma2)
    c = sigma2 / (1.0 + gamma)
    theta_w = float(np.sum((1.0 + w) * y)) / n
    calib_gap = ((1.0 + w)[:, None] * b).sum(axis=0) / n - basis.column_means
    beta_eq = (b * (w * r)[:, None]).sum(axis=0) / n
    sig_eq = float(np.sum(w * (r * r - c))) / n
    return theta_w - float(mu @ calib_gap) + float(zeta @ beta_eq) + nu * sig_eq


def solve_kappa_t2(
    dataset: Dataset,
    basis: BasisMatrix,
    fit: GammaFit,
    ps_fit: PropensityFit,
    mu: np.ndarray,
    zeta: np.ndarray,
    nu: float,
) -> np.ndarray:
    """Propensity-effect coefficient for the robust estimator.

    Uses the logistic specializations d(pi)/d(phi) = pi (1-pi) xt, h = pi xt,
    d(h)/d(phi) = pi (1-pi) xt xt'. Setting the empirical phi-gradient of the
    decorated functional to zero gives M kappa = v with
    M = sum_i pi_i (1-pi_i) xt_i xt_i' over all units and
    v = sum_i delta_i (d_i-1) g_i q_i [(y_i - b_i'mu) + r_i (b_i'zeta)
        + nu (r_i^2 - c)] xt_i.
    """
    b, y, r, w, c = _gamma_blocks(dataset, basis, fit, np.asarray(ps_fit.dhat()))
    mask = dataset.respondent_mask
    xt = logit_gradients(ps_fit)
    pi = ps_fit.probabilities
    m = (xt * (pi * (1.0 - pi))[:, None]).T @ xt
    bracket = (y - b @ mu) + r * (b @ zeta) + nu * (r * r - c)
    v = xt[mask].T @ (w * bracket)
    return _solve_checked(m, v)


def influence_t2(
    dataset: Dataset,
    basis: BasisMatrix,
    fit: GammaFit,
    ps_fit: PropensityFit,
    mu: np.ndarray,
    zeta: np.ndarray,
    nu: float,
    kappa: np.ndarray,
    theta_hat: float,
) -> InfluenceVector:
    """Influence values for the robust estimator with all plug-in coefficients.

    eta_i = b_i'mu - theta + delta_i w_i (y_i - b_i'mu) + (1 - delta_i d_i) h_i'kappa
            + delta_i (w_i - 1) r_i b_i'zeta
            + delta_i (w_i - 1) nu (r_i^2 - sigma^2/(1+gamma)).
    """
    delta = dataset.delta.astype(float)
    d = ps_fit.dhat()
    bvals = basis.values
    mask = dataset.respondent_mask
    q_full = np.ones(dataset.n)
    q_full[mask] = fit.q
    omega = 1.0 + (d - 1.0) * np.exp(bvals @ fit.lam) * q_full
    r = np.where(mask, np.nan_to_num(dataset.outcome - bvals @ fit.beta), 0.0)
    c = fit.sigma2 / (1.0 + fit.gamma)
    hk = h_values(ps_fit) @ kappa
    pred_mu = bvals @ mu
    resid_mu = np.where(mask, np.nan_to_num(dataset.outcome - pred_mu), 0.0)
    values = (
        pred_mu
        - theta_hat
        + delta * omega * resid_mu
        + (1.0 - delta * d) * hk
        + delta * (omega - 1.0) * r * (bvals @ zeta)
        + delta * (omega - 1.0) * nu * (r * r - c)
    )
    return InfluenceVector(values, "T2", np.asarray(kappa, dtype=float), mu, zeta, nu)
