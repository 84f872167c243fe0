"""Outlier-robust estimation through gamma-power-divergence weighting.

The robust weights w_i = 1 + (d_i - 1) g_i q_i multiply the inverse propensity
adjustment by g_i = exp(b_i' lambda) (calibration) and by the redescending
factor q_i = exp(-gamma r_i^2 / (2 sigma^2)) that collapses the influence of
large residuals. The three blocks (beta, sigma^2, lambda) are solved by
Gauss-Seidel style block iteration:

  (a) beta: weighted least squares with weights delta (d-1) g q,
  (b) sigma^2: scalar root of the redescending second-moment balance
      sum_i delta_i (d_i-1) g_i q_i(beta, s) (r_i^2 - s/(1+gamma)) = 0,
      safeguarded by bracketed root collection with the root nearest the
      previous iterate retained (the equation can have several roots),
  (c) lambda: the calibration Newton with d-1 replaced by (d-1) q.

gamma = 0 makes q identically one, so the iteration reproduces the plain
augmented-weight solution exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .balancing import solve_aps_lambda
from .data import BasisMatrix, WeightSet, calibration_residual
from .errors import (
    AllFoldsFailed,
    DegenerateSigmaWarning,
    DrCalibError,
    NonConvergence,
    SingularNormalEquations,
)

OUTER_TOL = 1e-8
MAX_OUTER = 200
SIGMA_FLOOR = 1e-8
COND_LIMIT = 1e12


@dataclass(frozen=True)
class GammaFit:
    """Converged robust parameter block with its estimating-equation residuals."""

    beta: np.ndarray
    sigma2: float
    lam: np.ndarray
    gamma: float
    q: np.ndarray  # respondent redescending factors in (0, 1]
    outer_iterations: int
    converged: bool
    calibration_residual: float
    beta_residual: float
    sigma2_residual: float
    sigma_degenerate: bool = False


def q_weight(residual, sigma2: float, gamma: float):
    """exp(-0.5 gamma residual^2 / sigma2); accepts scalars or arrays."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return np.exp(-0.5 * gamma * np.square(residual) / sigma2)


def _wls_beta(b_resp: np.ndarray, y_resp: np.ndarray, w: np.ndarray) -> np.ndarray:
    lhs = (b_resp * w[:, None]).T @ b_resp
    try:
        if np.linalg.cond(lhs) > COND_LIMIT:
            raise np.linalg.LinAlgError
        return np.linalg.solve(lhs, (b_resp * w[:, None]).T @ y_resp)
    except np.linalg.LinAlgError:
        raise SingularNormalEquations("robust weighted least squares system is singular") from None


def _sigma_equation(s: float, w_base: np.ndarray, r2: np.ndarray, gamma: float, n: int) -> float:
    q = np.exp(-0.5 * gamma * r2 / s)
    return float(np.sum(w_base * q * (r2 - s / (1.0 + gamma))) / n)


def _solve_sigma2(
    w_base: np.ndarray, r: np.ndarray, gamma: float, prev: float, n: int
) -> tuple[float, bool]:
    """Root of the sigma^2 balance nearest (in log scale) to the previous iterate.

    Returns (sigma2, degenerate). The bracket is [1e-8, (1+gamma) max r^2]; a
    collapsed bracket (all weighted residuals zero) pins sigma^2 at the floor.
    """
    r2 = r * r
    active = w_base > 0
    if not active.any() or float(np.max(r2[active])) == 0.0:
        return SIGMA_FLOOR, True
    hi = (1.0 + gamma) * float(np.max(r2[active]))
    if hi <= SIGMA_FLOOR:
        return SIGMA_FLOOR, True
    if gamma == 0.0:
        num = float(np.sum(w_base * r2))
        den = float(np.sum(w_base))
        return max(num / den, SIGMA_FLOOR), False

    grid = np.geomspace(SIGMA_FLOOR, hi, 96)
    prev_c = float(np.clip(prev, SIGMA_FLOOR, hi))
    grid = np.unique(np.append(grid, prev_c))
    vals = np.array([_sigma_equation(s, w_base, r2, gamma, n) for s in grid])
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa == 0.0 and fb == 0.0:
            continue  # underflow plateau at tiny s, not a real root
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0.0:
            roots.append(brentq(_sigma_equation, a, b, args=(w_base, r2, gamma, n), xtol=1e-14, rtol=1e-15))
    if vals[-1] == 0.0:
        roots.append(grid[-1])
    if not roots:
        return prev_c, False  # flat equation; keep the previous scale
    roots = np.asarray(roots)
    pick = roots[np.argmin(np.abs(roots - prev_c))]
    return float(max(pick, SIGMA_FLOOR)), False


def solve_gamma_system(
    basis: BasisMatrix,
    outcomes: np.ndarray,
    delta: np.ndarray,
    dhat: np.ndarray,
    gamma: float,
    tol: float = OUTER_TOL,
    max_outer: int = MAX_OUTER,
) -> GammaFit:
    """Block-coordinate solve of the robust calibration system for a fixed gamma.

    Initialization: beta by ordinary least squares on respondents, sigma^2 from
    its residual variance, lambda = 0. Convergence requires both a parameter
    max-change below tol and all three estimating-equation residuals below tol.
    Raises NonConvergence after ``max_outer`` outer iterations.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    delta = np.asarray(delta)
    dhat = np.asarray(dhat, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    mask = delta == 1
    b_resp = basis.values[mask]
    y_resp = y[mask]
    n = basis.n
    n1 = b_resp.shape[0]
    L1 = basis.size
    if n1 < L1 + 1:
        raise SingularNormalEquations(f"need at least {L1 + 1} respondents, got {n1}")
    adj = np.maximum(dhat[mask] - 1.0, 0.0)

    beta, *_ = np.linalg.lstsq(b_resp, y_resp, rcond=None)
    resid = y_resp - b_resp @ beta
    dof = max(n1 - L1, 1)
    sigma2 = max(float(resid @ resid) / dof, SIGMA_FLOOR)
    lam = np.zeros(L1)
    degenerate = False

    for it in range(1, max_outer + 1):
        beta_old, sigma2_old, lam_old = beta, sigma2, lam

        g = np.exp(b_resp @ lam)
        q = q_weight(y_resp - b_resp @ beta, sigma2, gamma)
        beta = _wls_beta(b_resp, y_resp, adj * g * q)
        resid = y_resp - b_resp @ beta

        sigma2, degenerate = _solve_sigma2(adj * g, resid, gamma, sigma2, n)
        if degenerate:
            warnings.warn(
                "all weighted residuals vanished; sigma2 pinned at 1e-8",
                DegenerateSigmaWarning,
            )

        q = q_weight(resid, sigma2, gamma)
        q_full = np.ones(n)
        q_full[mask] = q
        lam = solve_aps_lambda(basis, 1.0 + (dhat - 1.0) * q_full, delta, start=lam).lam

        change = max(
            float(np.max(np.abs(beta - beta_old))),
            abs(sigma2 - sigma2_old),
            float(np.max(np.abs(lam - lam_old))),
        )
        g = np.exp(b_resp @ lam)
        w = adj * g * q
        calib_res = calibration_residual(1.0 + w, delta, basis.values)
        beta_res = float(np.max(np.abs((b_resp * (w * resid)[:, None]).sum(axis=0) / n)))
        sigma_res = abs(_sigma_equation(sigma2, adj * g, resid * resid, gamma, n))
        # A degenerate scale has no root; the floor value is the fit, so its
        # (tiny) residual does not gate convergence.
        sigma_ok = degenerate or sigma_res <= tol
        if change <= tol and max(calib_res, beta_res) <= tol and sigma_ok:
            return GammaFit(
                beta, sigma2, lam, gamma, q, it, True,
                calib_res, beta_res, sigma_res, degenerate,
            )
    raise NonConvergence(
        f"gamma system did not converge in {max_outer} outer iterations "
        f"(last change {change:.3e}, residuals {calib_res:.1e}/{beta_res:.1e}/{sigma_res:.1e})"
    )


def gamma_weights(
    fit: GammaFit, dhat: np.ndarray, basis: BasisMatrix, delta: np.ndarray
) -> WeightSet:
    """Robust calibrated weights w_i = 1 + (d_i - 1) g_i q_i for respondents."""
    delta = np.asarray(delta)
    mask = delta == 1
    adj = np.maximum(np.asarray(dhat, dtype=float)[mask] - 1.0, 0.0)
    g = np.exp(basis.values[mask] @ fit.lam)
    weights = 1.0 + adj * g * fit.q
    return WeightSet.calibrated(weights, f"APSg{fit.gamma:g}", delta, basis.values)


def _stratified_folds(delta: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal respondents and nonrespondents into k folds after a seeded shuffle."""
    folds: list[list[int]] = [[] for _ in range(k)]
    for group in (np.nonzero(delta == 1)[0], np.nonzero(delta == 0)[0]):
        order = rng.permutation(group)
        for pos, idx in enumerate(order):
            folds[pos % k].append(int(idx))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def gamma_cv_profile(
    basis: BasisMatrix,
    outcomes: np.ndarray,
    delta: np.ndarray,
    dhat: np.ndarray,
    grid: Sequence[float],
    folds: int,
    seed: int = 0,
) -> list[tuple[float, float, int]]:
    """K-fold MSPE profile: for each gamma, sum over folds of the held-out
    respondent squared prediction errors sum_{i in S_k} delta_i (y_i - b_i'beta^(-k))^2.

    Folds are stratified on delta. Solver failures skip the fold with a
    warning; a gamma with every fold failed gets an infinite MSPE.
    Returns (gamma, mspe, folds_used) sorted by the grid order.
    """
    if not len(grid):
        raise ValueError("gamma grid must be nonempty")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    delta = np.asarray(delta)
    y = np.asarray(outcomes, dtype=float)
    dhat = np.asarray(dhat, dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5B5)))
    fold_idx = _stratified_folds(delta, folds, rng)
    all_idx = np.arange(basis.n)

    profile = []
    for gam in grid:
        total, used = 0.0, 0
        for k, test in enumerate(fold_idx):
            train = np.setdiff1d(all_idx, test, assume_unique=True)
            if delta[train].sum() < basis.size + 1:
                warnings.warn(f"fold {k} skipped: too few respondents in complement")
                continue
            sub_basis = basis.subset(train)
            try:
                fit = solve_gamma_system(sub_basis, y[train], delta[train], dhat[train], gam)
            except DrCalibError as exc:
                warnings.warn(f"fold {k} skipped for gamma={gam:g}: {exc}")
                continue
            held = test[delta[test] == 1]
            pred = basis.values[held] @ fit.beta
            total += float(np.sum((y[held] - pred) ** 2))
            used += 1
        profile.append((float(gam), total if used else np.inf, used))
    if all(np.isinf(m) for _, m, _ in profile):
        raise AllFoldsFailed("every fold failed for every gamma in the grid")
    return profile


def select_gamma_cv(
    basis: BasisMatrix,
    outcomes: np.ndarray,
    delta: np.ndarray,
    dhat: np.ndarray,
    grid: Sequence[float],
    folds: int,
    seed: int = 0,
) -> float:
    """Gamma minimizing the K-fold MSPE; ties break toward the smallest gamma."""
    profile = gamma_cv_profile(basis, outcomes, delta, dhat, grid, folds, seed)
    best_gamma, best = None, np.inf
    for gam, mspe, _ in sorted(profile, key=lambda t: t[0]):
        if mspe < best:
            best_gamma, best = gam, mspe
    return float(best_gamma)
