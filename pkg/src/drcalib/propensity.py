"""Working propensity score fits: logistic MLE and an exactly calibrated fit.

The second fit minimizes a convex loss whose first-order condition forces the
inverse-probability weights to reproduce the full-sample design means. Both
fits use damped Newton iterations; estimating-equation residuals are tracked
on the n^-1 scale and convergence requires a max-norm residual of at most
1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import (
    MaxIterationsExceeded,
    SeparationDetected,
    SingularHessian,
    Unbounded,
)

SCORE_TOL = 1e-8
MAX_NEWTON_ITER = 100
PHI_BOUND = 30.0  # beyond this the fitted probabilities are numerically 0/1
PROB_CLIP = 1e-10  # applied only when forming d = 1/pi, never in the likelihood


@dataclass(frozen=True)
class PropensityFit:
    """Fitted propensity model pi_0(x; phi) on a given design matrix."""

    phi: np.ndarray
    probabilities: np.ndarray
    method: str  # "mle" | "tan-calibrated"
    design: np.ndarray
    iterations: int
    score_norm: float

    def dhat(self) -> np.ndarray:
        """Inverse probability weights 1/pi, with probabilities clipped for reporting."""
        return 1.0 / np.clip(self.probabilities, PROB_CLIP, 1.0 - PROB_CLIP)


def _check_design(dataset: Dataset, design: np.ndarray) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    if design.ndim != 2 or design.shape[0] != dataset.n:
        raise ValueError(f"design shape {design.shape} does not match n={dataset.n}")
    if dataset.n < design.shape[1]:
        raise ValueError("need at least as many observations as design columns")
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularHessian("design matrix is column rank deficient")
    return design


def fit_logistic_mle(dataset: Dataset, design: np.ndarray) -> PropensityFit:
    """Maximize the binomial log likelihood by Newton iterations.

    Raises SeparationDetected once any coefficient passes +-30 (complete or
    quasi separation), SingularHessian, or MaxIterationsExceeded.
    """
    design = _check_design(dataset, design)
    n, p = design.shape
    delta = dataset.delta.astype(float)
    phi = np.zeros(p)
    score_norm = np.inf
    for it in range(MAX_NEWTON_ITER):
        u = design @ phi
        pi = expit(u)
        score = design.T @ (delta - pi) / n
        score_norm = float(np.max(np.abs(score)))
        if score_norm <= SCORE_TOL:
            if np.max(np.abs(u)) > PHI_BOUND:
                raise SeparationDetected("fitted probabilities are numerically 0/1")
            return PropensityFit(phi, pi, "mle", design, it, score_norm)
        w = pi * (1.0 - pi)
        hess = (design * w[:, None]).T @ design / n
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SingularHessian("logistic information matrix is singular") from None
        # Halve the step until the score norm decreases (the likelihood is concave).
        scale = 1.0
        for _ in range(30):
            trial = phi + scale * step
            trial_score = design.T @ (delta - expit(design @ trial)) / n
            if np.max(np.abs(trial_score)) < score_norm:
                break
            scale *= 0.5
        phi = phi + scale * step
        if np.max(np.abs(phi)) > PHI_BOUND:
            raise SeparationDetected(
                f"|phi| exceeded {PHI_BOUND} during iteration; data are separated"
            )
    raise MaxIterationsExceeded(f"logistic MLE: score norm {score_norm:.3e} after {MAX_NEWTON_ITER} iterations")


def _tan_objective(phi: np.ndarray, design: np.ndarray, delta: np.ndarray) -> float:
    u = design @ phi
    if np.any(-u > 700.0):
        return np.inf
    return float(np.sum(delta * np.exp(-u) + (1.0 - delta) * u))


def fit_tan_calibrated(dataset: Dataset, design: np.ndarray) -> PropensityFit:
    """Minimize the calibrated loss sum_i [delta_i exp(-phi'f_i) + (1-delta_i) phi'f_i].

    The first order condition is the exact calibration identity
    sum_i delta_i f_i / pi_i = sum_i f_i. Requires at least one nonrespondent;
    with full response the loss has no stationary point and Unbounded is raised.
    """
    design = _check_design(dataset, design)
    n, p = design.shape
    delta = dataset.delta.astype(float)
    if dataset.n0 == 0:
        raise Unbounded("calibrated loss has no minimizer under full response")
    phi = np.zeros(p)
    obj = _tan_objective(phi, design, delta)
    resid_norm = np.inf
    for it in range(MAX_NEWTON_ITER):
        u = design @ phi
        e = np.exp(-u)
        # n^-1 grad = -(calibration residual); convergence is on the residual.
        grad = design.T @ ((1.0 - delta) - delta * e) / n
        resid_norm = float(np.max(np.abs(grad)))
        if resid_norm <= SCORE_TOL:
            pi = expit(u)
            return PropensityFit(phi, pi, "tan-calibrated", design, it, resid_norm)
        hess = (design * (delta * e)[:, None]).T @ design / n
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            raise SingularHessian("calibrated loss Hessian is singular") from None
        scale = 1.0
        accepted = False
        for _ in range(50):
            trial = phi + scale * step
            trial_obj = _tan_objective(trial, design, delta)
            if trial_obj < obj:
                phi, obj, accepted = trial, trial_obj, True
                break
            scale *= 0.5
        if not accepted or np.max(np.abs(phi)) > PHI_BOUND:
            raise Unbounded("calibrated loss is not decreasing toward a stationary point")
    raise MaxIterationsExceeded(f"Tan fit: residual {resid_norm:.3e} after {MAX_NEWTON_ITER} iterations")


def h_values(fit: PropensityFit) -> np.ndarray:
    """All rows of h(x; phi) = pi_0(x; phi) * xtilde, the score choice.

    With this choice the phi estimating equation n^-1 sum (delta_i/pi_i - 1) h_i
    coincides with the logistic score equation.
    """
    return fit.probabilities[:, None] * fit.design


def h_function(fit: PropensityFit, row: int) -> np.ndarray:
    return fit.probabilities[row] * fit.design[row]


def logit_gradients(fit: PropensityFit) -> np.ndarray:
    """d logit(pi_0)/d phi for every row; the logit is linear, so this is the design."""
    return fit.design


def logit_gradient(fit: PropensityFit, row: int) -> np.ndarray:
    return fit.design[row]
