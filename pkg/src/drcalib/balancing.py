"""Calibration weight solvers.

Two routes to weights satisfying the covariate balancing equations: the
augmented inverse-probability weights w_i = 1 + (d_i - 1) exp(b_i' lambda)
with lambda solved from the exact calibration system, and entropy balancing,
which rescales d_i exp(b_i' lambda) to match the same targets. Also the
internally bias-calibrated regression coefficient that ties the weighting form
to its imputation form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BasisMatrix, WeightSet
from .errors import (
    Infeasible,
    MaxIterationsExceeded,
    SingularJacobian,
    SingularNormalEquations,
    WeightOverflow,
)

CALIB_TOL = 1e-8
MAX_ITER = 100
EXP_CAP = 1e12  # weight adjustment factors beyond this are treated as overflow
COND_LIMIT = 1e12


@dataclass(frozen=True)
class LambdaSolve:
    """Lagrange multipliers for the calibration system with solver diagnostics."""

    lam: np.ndarray
    residual_history: tuple[float, ...]
    converged: bool
    iterations: int


def _balancing_gap(basis: BasisMatrix, adj: np.ndarray, delta: np.ndarray, lam: np.ndarray):
    """F(lam) = n^-1 sum_i delta_i [1 + adj_i e^{b_i'lam}] b_i - n^-1 sum_i b_i.

    Returns (F, per-respondent e^{b'lam}) or (None, None) when the exponential
    passes the overflow cap. ``adj`` holds d_i - 1 restricted to respondents.
    """
    b_resp = basis.values[delta == 1]
    expo = b_resp @ lam
    if np.any(expo > np.log(EXP_CAP)):
        return None, None
    g = np.exp(expo)
    n = basis.n
    lhs = (b_resp * (1.0 + adj * g)[:, None]).sum(axis=0) / n
    return lhs - basis.column_means, g


def solve_aps_lambda(
    basis: BasisMatrix,
    dhat: np.ndarray,
    delta: np.ndarray,
    start: Optional[np.ndarray] = None,
) -> LambdaSolve:
    """Newton solve of the exact calibration equations for the augmented weights.

    F is the gradient of a convex potential, so damped Newton (step halving on
    ||F||^2) converges globally whenever the system is feasible. Start at
    lambda = 0 unless a warm start is supplied.

    Raises SingularJacobian (for example all d_i = 1 with a nonzero gap),
    WeightOverflow if any adjustment factor exceeds 1e12 at an accepted
    iterate, or MaxIterationsExceeded.
    """
    delta = np.asarray(delta)
    dhat = np.asarray(dhat, dtype=float)
    adj = dhat[delta == 1] - 1.0
    if np.any(adj < -1e-12):
        raise ValueError("dhat must be >= 1 on respondents")
    adj = np.maximum(adj, 0.0)
    b_resp = basis.values[delta == 1]
    n = basis.n

    lam = np.zeros(basis.size) if start is None else np.asarray(start, dtype=float).copy()
    gap, g = _balancing_gap(basis, adj, delta, lam)
    if gap is None:
        raise WeightOverflow("warm start already overflows the weight adjustment")
    history = [float(np.max(np.abs(gap)))]
    # Newton converges quadratically, so keep polishing toward 1e-12; the
    # convergence contract itself is the 1e-8 residual.
    polish_tol = CALIB_TOL * 1e-4
    if history[-1] <= polish_tol:
        return LambdaSolve(lam, tuple(history), True, 0)

    for it in range(1, MAX_ITER + 1):
        jac = (b_resp * (adj * g)[:, None]).T @ b_resp / n
        try:
            if np.linalg.cond(jac) > COND_LIMIT:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(jac, -gap)
        except np.linalg.LinAlgError:
            raise SingularJacobian(
                "calibration Jacobian is singular; targets cannot be moved"
            ) from None
        merit = gap @ gap
        scale = 1.0
        accepted = False
        overflowed = False
        for _ in range(30):
            trial = lam + scale * step
            trial_gap, trial_g = _balancing_gap(basis, adj, delta, trial)
            if trial_gap is None:
                overflowed = True
            elif trial_gap @ trial_gap < merit:
                lam, gap, g = trial, trial_gap, trial_g
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if history[-1] <= CALIB_TOL:
                return LambdaSolve(lam, tuple(history), True, it)
            if overflowed:
                raise WeightOverflow("weight adjustment factor exceeded 1e12")
            raise MaxIterationsExceeded("calibration line search stalled")
        if np.any(adj * g > EXP_CAP):
            raise WeightOverflow("weight adjustment factor exceeded 1e12")
        history.append(float(np.max(np.abs(gap))))
        if history[-1] <= polish_tol:
            return LambdaSolve(lam, tuple(history), True, it)
    if history[-1] <= CALIB_TOL:
        return LambdaSolve(lam, tuple(history), True, MAX_ITER)
    raise MaxIterationsExceeded(
        f"calibration residual {history[-1]:.3e} after {MAX_ITER} Newton iterations"
    )


def aps_weights(
    basis: BasisMatrix, dhat: np.ndarray, lam: np.ndarray, delta: np.ndarray, source: str = "APS"
) -> WeightSet:
    """w_i = 1 + (d_i - 1) exp(b_i' lambda) for respondents."""
    delta = np.asarray(delta)
    b_resp = basis.values[delta == 1]
    adj = np.maximum(np.asarray(dhat, dtype=float)[delta == 1] - 1.0, 0.0)
    weights = 1.0 + adj * np.exp(b_resp @ lam)
    return WeightSet.calibrated(weights, source, delta, basis.values)


def solve_entropy_balancing(basis: BasisMatrix, dhat: np.ndarray, delta: np.ndarray) -> WeightSet:
    """Entropy balancing weights rescaled so the respondent weights sum to n.

    The intercept constraint is absorbed into the normalization, leaving L dual
    variables solved by Newton on the strictly convex dual (a log-sum-exp of
    centered basis columns). Divergence of the dual norm beyond 1e3, or more
    than 200 iterations, signals infeasible targets.
    """
    delta = np.asarray(delta)
    dhat = np.asarray(dhat, dtype=float)
    if delta.sum() < 1:
        raise Infeasible("no respondents to balance")
    n = basis.n
    b_resp = basis.values[delta == 1]
    d_resp = dhat[delta == 1]
    L = basis.size - 1
    if L == 0:
        weights = n * d_resp / d_resp.sum()
        return WeightSet.calibrated(weights, "HM", delta, basis.values)

    centered = b_resp[:, 1:] - basis.column_means[1:]
    log_d = np.log(d_resp)
    lam_t = np.zeros(L)
    for it in range(200):
        u = log_d + centered @ lam_t
        u -= u.max()
        w = np.exp(u)
        w /= w.sum()
        grad = centered.T @ w
        if np.max(np.abs(grad)) <= CALIB_TOL / 10:
            break
        diff = centered - centered.T @ w
        hess = (diff * w[:, None]).T @ diff
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            raise SingularJacobian("entropy balancing dual Hessian is singular") from None
        merit = grad @ grad
        scale = 1.0
        for _ in range(40):
            trial = lam_t + scale * step
            ut = log_d + centered @ trial
            ut -= ut.max()
            wt = np.exp(ut)
            wt /= wt.sum()
            if (g2 := centered.T @ wt) @ g2 < merit:
                lam_t = trial
                break
            scale *= 0.5
        else:
            raise Infeasible("entropy balancing dual stalled; targets likely outside the hull")
        if np.linalg.norm(lam_t) > 1e3:
            raise Infeasible("entropy balancing dual diverged; targets outside the respondent hull")
    else:
        raise Infeasible("entropy balancing did not converge in 200 iterations")

    u = log_d + centered @ lam_t
    u -= u.max()
    w = np.exp(u)
    weights = n * w / w.sum()
    ws = WeightSet.calibrated(weights, "HM", delta, basis.values)
    if ws.calibration_residual > CALIB_TOL:
        raise Infeasible(
            f"entropy balancing residual {ws.calibration_residual:.3e} above tolerance"
        )
    return ws


def ibc_beta(
    basis: BasisMatrix,
    outcomes: np.ndarray,
    weights: WeightSet | np.ndarray,
    delta: np.ndarray,
) -> np.ndarray:
    """Internally bias-calibrated regression coefficient.

    Solves sum_i delta_i (w_i - 1) b_i b_i' beta = sum_i delta_i (w_i - 1) b_i y_i,
    which makes the weighted residuals orthogonal to every basis column.
    """
    delta = np.asarray(delta)
    w = weights.weights if isinstance(weights, WeightSet) else np.asarray(weights, dtype=float)
    b_resp = basis.values[delta == 1]
    y_resp = np.asarray(outcomes, dtype=float)[delta == 1]
    a = w - 1.0
    lhs = (b_resp * a[:, None]).T @ b_resp
    try:
        if np.linalg.cond(lhs) > COND_LIMIT:
            raise np.linalg.LinAlgError
        return np.linalg.solve(lhs, (b_resp * a[:, None]).T @ y_resp)
    except np.linalg.LinAlgError:
        raise SingularNormalEquations(
            "bias-calibrated normal equations are singular (all weights equal to 1?)"
        ) from None
