"""Shared data containers: datasets, basis construction, and calibrated weight sets.

Missingness is stored as NaN in the outcome column and must agree with the
response indicator; ``validate`` enforces the exact correspondence so that
contaminated (but observed) outcomes can never be mistaken for missing ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptyRespondentSet,
    NonFiniteBasisValue,
    OutcomePresenceViolation,
    ShapeMismatch,
)

TransformFn = Callable[[np.ndarray], np.ndarray]

_TRANSFORMS: dict[str, TransformFn] = {}


def register_transform(name: str, fn: TransformFn) -> None:
    """Register a named basis transform, a pure function of the covariate matrix.

    The function receives the full (n, p) covariate matrix and must return a
    length-n column. Registration by name keeps CSV-driven configurations
    reproducible; anonymous callables are not accepted at the CLI boundary.
    """
    if not name or not name.isidentifier():
        raise ValueError(f"transform name must be an identifier, got {name!r}")
    _TRANSFORMS[name] = fn


def get_transform(name: str) -> TransformFn:
    try:
        return _TRANSFORMS[name]
    except KeyError:
        raise KeyError(f"no transform registered under {name!r}") from None


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Observations (x_i, delta_i, delta_i * y_i) for i = 1..n.

    ``outcome`` is a float column with NaN exactly where ``delta`` is 0.
    Instances are immutable after construction and safe to share across
    concurrent replications.
    """

    covariates: np.ndarray
    delta: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariates", _freeze(np.asarray(self.covariates, dtype=float)))
        object.__setattr__(self, "delta", _freeze(np.asarray(self.delta, dtype=int)))
        object.__setattr__(self, "outcome", _freeze(np.asarray(self.outcome, dtype=float)))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def n1(self) -> int:
        return int(self.delta.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def respondent_mask(self) -> np.ndarray:
        return self.delta == 1

    def respondent_outcomes(self) -> np.ndarray:
        return self.outcome[self.respondent_mask]


def validate(dataset: Dataset) -> None:
    """Check the Dataset invariants, raising on the first violation.

    Raises ShapeMismatch, OutcomePresenceViolation (with the offending row),
    or EmptyRespondentSet.
    """
    x, d, y = dataset.covariates, dataset.delta, dataset.outcome
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeMismatch(f"covariates must be a nonempty 2-d matrix, got shape {x.shape}")
    n = x.shape[0]
    if d.shape != (n,) or y.shape != (n,):
        raise ShapeMismatch(
            f"delta/outcome lengths {d.shape}/{y.shape} do not match n={n}"
        )
    if not np.isin(d, (0, 1)).all():
        raise ShapeMismatch("delta entries must be 0 or 1")
    if not np.isfinite(x).all():
        raise ShapeMismatch("covariates must be finite")
    present = np.isfinite(y)
    bad = np.nonzero(present != (d == 1))[0]
    if bad.size:
        raise OutcomePresenceViolation(int(bad[0]))
    if d.sum() < 1:
        raise EmptyRespondentSet("dataset has no respondents")


@dataclass(frozen=True)
class BasisTerm:
    """One basis function descriptor: intercept, raw coordinate, or named transform."""

    kind: str  # "intercept" | "raw" | "transform"
    column: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("intercept", "raw", "transform"):
            raise ValueError(f"unknown basis term kind {self.kind!r}")
        if self.kind == "transform" and not self.name:
            raise ValueError("transform terms need a registered name")

    def evaluate(self, covariates: np.ndarray) -> np.ndarray:
        if self.kind == "intercept":
            return np.ones(covariates.shape[0])
        if self.kind == "raw":
            return covariates[:, self.column]
        return np.asarray(get_transform(self.name)(covariates), dtype=float)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered basis descriptors; the leading term is always the intercept."""

    terms: tuple[BasisTerm, ...]

    def __post_init__(self):
        if not self.terms or self.terms[0].kind != "intercept":
            raise ValueError("the first basis term must be the intercept")

    @property
    def size(self) -> int:
        return len(self.terms)

    @classmethod
    def default(cls, p: int) -> "BasisSpec":
        """Intercept plus every raw covariate coordinate."""
        return cls((BasisTerm("intercept"),) + tuple(BasisTerm("raw", j) for j in range(p)))

    @classmethod
    def from_terms(cls, kinds: Sequence[str]) -> "BasisSpec":
        """Build from compact tokens: "1", "raw:<j>", or "<registered-name>"."""
        out = [BasisTerm("intercept")]
        for tok in kinds:
            if tok == "1":
                continue
            if tok.startswith("raw:"):
                out.append(BasisTerm("raw", int(tok.split(":", 1)[1])))
            else:
                out.append(BasisTerm("transform", name=tok))
        return cls(tuple(out))


@dataclass(frozen=True)
class BasisMatrix:
    """Basis evaluations b_i = (1, b_1(x_i), ..., b_L(x_i)) with their column means."""

    values: np.ndarray
    column_means: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=float)))
        object.__setattr__(self, "column_means", _freeze(np.asarray(self.column_means, dtype=float)))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_values(cls, values: np.ndarray) -> "BasisMatrix":
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or not (values[:, 0] == 1.0).all():
            raise ShapeMismatch("basis values must be 2-d with an all-ones first column")
        return cls(values, values.mean(axis=0))

    def subset(self, rows: np.ndarray) -> "BasisMatrix":
        """Restrict to a row subset, recomputing the calibration targets."""
        return BasisMatrix.from_values(self.values[rows])


def build_basis(dataset: Dataset, spec: BasisSpec) -> BasisMatrix:
    """Evaluate the basis spec on every dataset row.

    Raises NonFiniteBasisValue(row, column) if any evaluation is NaN or
    infinite. Deterministic: identical inputs produce bit-identical matrices.
    """
    cols = []
    for j, term in enumerate(spec.terms):
        col = np.asarray(term.evaluate(dataset.covariates), dtype=float)
        if col.shape != (dataset.n,):
            raise ShapeMismatch(f"basis term {j} returned shape {col.shape}, expected ({dataset.n},)")
        bad = np.nonzero(~np.isfinite(col))[0]
        if bad.size:
            raise NonFiniteBasisValue(int(bad[0]), j)
        cols.append(col)
    values = np.column_stack(cols)
    return BasisMatrix(values, values.mean(axis=0))


def calibration_residual(
    weights: np.ndarray, delta: np.ndarray, targets: np.ndarray
) -> float:
    """Max-norm of n^-1 sum_i delta_i w_i t_i - n^-1 sum_i t_i for target columns t."""
    n = targets.shape[0]
    full = np.zeros(n)
    full[delta == 1] = weights
    gap = (full * delta) @ targets / n - targets.mean(axis=0)
    return float(np.max(np.abs(gap)))


@dataclass(frozen=True)
class WeightSet:
    """Respondent weights with provenance and the achieved calibration residual."""

    weights: np.ndarray
    source: str
    calibration_residual: float

    def __post_init__(self):
        object.__setattr__(self, "weights", _freeze(np.asarray(self.weights, dtype=float)))

    @classmethod
    def calibrated(
        cls, weights: np.ndarray, source: str, delta: np.ndarray, targets: np.ndarray
    ) -> "WeightSet":
        return cls(weights, source, calibration_residual(weights, delta, targets))

    def verify_residual(self, delta: np.ndarray, targets: np.ndarray, tol: float = 1e-12) -> bool:
        return abs(calibration_residual(self.weights, delta, targets) - self.calibration_residual) <= tol


@dataclass(frozen=True)
class FitState:
    """Converged parameter block shared by the estimator reports."""

    phi: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    sigma2: float
    gamma: float
    iterations: int
    converged: bool
    grad_norm: float

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
