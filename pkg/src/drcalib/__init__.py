"""Calibrated doubly robust and outlier-robust estimation of a population mean
under missing-at-random nonresponse."""

from .balancing import (
    LambdaSolve,
    aps_weights,
    ibc_beta,
    solve_aps_lambda,
    solve_entropy_balancing,
)
from .data import (
    BasisMatrix,
    BasisSpec,
    BasisTerm,
    Dataset,
    FitState,
    WeightSet,
    build_basis,
    calibration_residual,
    register_transform,
    validate,
)
from .estimators import (
    EstimateReport,
    estimate_aps,
    estimate_aps_gamma,
    estimate_cc,
    estimate_hm,
    estimate_ipw,
    estimate_tan,
    run_roster,
)
from .gamma import (
    GammaFit,
    gamma_cv_profile,
    gamma_weights,
    q_weight,
    select_gamma_cv,
    solve_gamma_system,
)
from .propensity import (
    PropensityFit,
    fit_logistic_mle,
    fit_tan_calibrated,
    h_function,
    h_values,
    logit_gradient,
    logit_gradients,
)
from .simulate import (
    MonteCarloSummary,
    ScenarioSpec,
    apply_pm34,
    calibrate_intercept,
    generate,
    run_monte_carlo,
    truth_theta,
)
from .variance import (
    InfluenceVector,
    influence_t1,
    influence_t2,
    solve_kappa_t1,
    solve_kappa_t2,
    solve_nuisance_t2,
    variance_t1,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
