import numpy as np
import pytest

from drcalib import (
    BasisMatrix,
    Dataset,
    WeightSet,
    aps_weights,
    ibc_beta,
    solve_aps_lambda,
    solve_entropy_balancing,
)
from drcalib.errors import Infeasible, SingularNormalEquations, WeightOverflow
from tests.conftest import make_instance


def _intercept_basis(n):
    return BasisMatrix.from_values(np.ones((n, 1)))


class TestSolveApsLambda:
    def test_closed_form_identity_weights(self):
        basis = _intercept_basis(4)
        delta = np.array([1, 1, 0, 0])
        solve = solve_aps_lambda(basis, np.array([2.0, 2.0, 1.0, 1.0]), delta)
        np.testing.assert_allclose(solve.lam, [0.0], atol=1e-12)
        assert solve.converged

    def test_closed_form_log_half(self):
        # 2 + 4 e^lam = 4 at e^lam = 1/2.
        basis = _intercept_basis(4)
        delta = np.array([1, 1, 0, 0])
        solve = solve_aps_lambda(basis, np.array([3.0, 3.0, 1.0, 1.0]), delta)
        np.testing.assert_allclose(solve.lam, [np.log(0.5)], atol=1e-10)

    def test_residual_below_tolerance(self, instance):
        ds, basis, design, fit = instance
        solve = solve_aps_lambda(basis, fit.dhat(), ds.delta)
        ws = aps_weights(basis, fit.dhat(), solve.lam, ds.delta)
        assert ws.calibration_residual <= 1e-8

    def test_full_response_returns_zero(self):
        basis = _intercept_basis(5)
        solve = solve_aps_lambda(basis, np.ones(5), np.ones(5, dtype=int))
        np.testing.assert_array_equal(solve.lam, [0.0])
        assert solve.converged

    def test_jacobian_matches_finite_differences(self, rng):
        ds, basis, design = make_instance(rng, n=60, L=2)
        dhat = 1.0 + rng.uniform(0.2, 2.0, size=ds.n)
        delta = ds.delta
        lam = rng.normal(scale=0.1, size=basis.size)
        adj = dhat[delta == 1] - 1.0
        b_resp = basis.values[delta == 1]

        def gap(lmb):
            g = np.exp(b_resp @ lmb)
            return (b_resp * (1.0 + adj * g)[:, None]).sum(axis=0) / ds.n - basis.column_means

        g = np.exp(b_resp @ lam)
        jac = (b_resp * (adj * g)[:, None]).T @ b_resp / ds.n
        eps = 1e-6
        for j in range(basis.size):
            e = np.zeros(basis.size)
            e[j] = eps
            fd = (gap(lam + e) - gap(lam - e)) / (2 * eps)
            np.testing.assert_allclose(jac[:, j], fd, rtol=1e-5, atol=1e-8)

    def test_permutation_invariance(self, rng):
        ds, basis, design = make_instance(rng, n=70, L=2)
        dhat = 1.0 + rng.uniform(0.2, 2.0, size=ds.n)
        solve = solve_aps_lambda(basis, dhat, ds.delta)
        perm = rng.permutation(ds.n)
        basis2 = BasisMatrix.from_values(basis.values[perm])
        solve2 = solve_aps_lambda(basis2, dhat[perm], ds.delta[perm])
        np.testing.assert_allclose(solve.lam, solve2.lam, atol=1e-10)

    def test_weight_overflow(self):
        # Targets far outside what the respondents can reach force lambda to blow up.
        values = np.column_stack([np.ones(6), np.array([0.0, 0.01, 0.02, 40.0, 41.0, 42.0])])
        basis = BasisMatrix.from_values(values)
        delta = np.array([1, 1, 1, 0, 0, 0])
        with pytest.raises(WeightOverflow):
            solve_aps_lambda(basis, np.full(6, 1.5), delta)


class TestLambdaShrinks:
    @pytest.mark.slow
    def test_lambda_small_under_correct_working_model(self):
        # With a correctly specified propensity model the multipliers vanish
        # asymptotically; at n = 1000 their norm is typically below 0.2.
        from drcalib.simulate import ScenarioSpec, generate
        from drcalib import BasisSpec, build_basis, fit_logistic_mle

        norms = []
        for rep in range(30):
            ds = generate(ScenarioSpec("OM1", "PM1", n=1000, seed=5000 + rep))
            basis = build_basis(ds, BasisSpec.default(2))
            design = np.column_stack([np.ones(ds.n), ds.covariates])
            fit = fit_logistic_mle(ds, design)
            solve = solve_aps_lambda(basis, fit.dhat(), ds.delta)
            norms.append(float(np.linalg.norm(solve.lam)))
        norms = np.sort(norms)
        assert norms[len(norms) // 2] < 0.2  # median
        assert norms[int(0.9 * len(norms))] < 0.4


class TestApsWeights:
    def test_lambda_zero_gives_dhat(self, instance):
        ds, basis, design, fit = instance
        ws = aps_weights(basis, fit.dhat(), np.zeros(basis.size), ds.delta)
        np.testing.assert_allclose(ws.weights, fit.dhat()[ds.respondent_mask])

    def test_unit_dhat_gives_unit_weights(self, rng):
        basis = _intercept_basis(6)
        delta = np.array([1, 1, 1, 0, 0, 0])
        ws = aps_weights(basis, np.ones(6), np.array([3.7]), delta)
        np.testing.assert_array_equal(ws.weights, np.ones(3))

    def test_weights_at_least_one(self, instance):
        ds, basis, design, fit = instance
        solve = solve_aps_lambda(basis, fit.dhat(), ds.delta)
        ws = aps_weights(basis, fit.dhat(), solve.lam, ds.delta)
        assert np.all(ws.weights >= 1.0)


class TestEntropyBalancing:
    def test_intercept_only_normalization(self):
        basis = _intercept_basis(5)
        delta = np.array([1, 1, 0, 0, 0])
        dhat = np.array([3.0, 1.5, 1.0, 1.0, 1.0])
        ws = solve_entropy_balancing(basis, dhat, delta)
        np.testing.assert_allclose(ws.weights, 5 * np.array([3.0, 1.5]) / 4.5)

    def test_constant_dhat_gives_n_over_n1(self):
        basis = _intercept_basis(8)
        delta = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        ws = solve_entropy_balancing(basis, np.full(8, 2.5), delta)
        np.testing.assert_allclose(ws.weights, np.full(4, 2.0))

    def test_balanced_means_and_constant_dhat(self):
        # Respondent basis means already equal the full means: dual optimum at 0.
        col = np.array([1.0, -1.0, 2.0, -2.0, 1.0, -1.0, 2.0, -2.0])
        basis = BasisMatrix.from_values(np.column_stack([np.ones(8), col]))
        delta = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        ws = solve_entropy_balancing(basis, np.full(8, 3.0), delta)
        np.testing.assert_allclose(ws.weights, np.full(4, 2.0), atol=1e-9)

    def test_residual_below_tolerance(self, instance):
        ds, basis, design, fit = instance
        ws = solve_entropy_balancing(basis, fit.dhat(), ds.delta)
        assert ws.calibration_residual <= 1e-8

    def test_infeasible_targets(self):
        # All respondents sit below the full-sample mean of the covariate.
        col = np.array([0.0, 0.1, 0.2, 5.0, 6.0, 7.0])
        basis = BasisMatrix.from_values(np.column_stack([np.ones(6), col]))
        delta = np.array([1, 1, 1, 0, 0, 0])
        with pytest.raises(Infeasible):
            solve_entropy_balancing(basis, np.full(6, 1.2), delta)


class TestIbcBeta:
    def test_constant_weights_intercept_only(self):
        basis = _intercept_basis(4)
        delta = np.array([1, 1, 1, 0])
        y = np.array([1.0, 2.0, 6.0, np.nan])
        ws = WeightSet.calibrated(np.full(3, 2.0), "APS", delta, basis.values)
        beta = ibc_beta(basis, y, ws, delta)
        np.testing.assert_allclose(beta, [3.0])

    def test_exact_interpolation(self, rng):
        ds, basis, design = make_instance(rng, n=50, L=2)
        beta_true = np.array([0.7, -1.2, 2.0])
        y = np.where(ds.delta == 1, basis.values @ beta_true, np.nan)
        ds2 = Dataset(ds.covariates, ds.delta, y)
        w = 1.0 + rng.uniform(0.1, 2.0, size=ds.n1)
        beta = ibc_beta(basis, ds2.outcome, w, ds2.delta)
        np.testing.assert_allclose(beta, beta_true, atol=1e-10)

    def test_grid_search_oracle(self):
        # Dense grid minimizer of Q(beta) = sum delta (y - b'beta)^2 (w - 1)
        # must match the closed-form solve to the grid resolution.
        rng = np.random.default_rng(3)
        n = 8
        x = rng.standard_normal((n, 1))
        delta = np.array([1, 1, 1, 1, 1, 1, 0, 0])
        y = np.where(delta == 1, 1.0 + 2.0 * x[:, 0] + rng.standard_normal(n), np.nan)
        basis = BasisMatrix.from_values(np.column_stack([np.ones(n), x[:, 0]]))
        w = 1.0 + rng.uniform(0.1, 3.0, size=6)
        beta = ibc_beta(basis, y, w, delta)

        b0 = np.arange(beta[0] - 0.5 + 3.3e-4, beta[0] + 0.5, 1e-3)
        b1 = np.arange(beta[1] - 0.5 + 3.3e-4, beta[1] + 0.5, 1e-3)
        b_resp = basis.values[delta == 1]
        y_resp = y[delta == 1]
        resid = y_resp[None, None, :] - b0[:, None, None] - b1[None, :, None] * b_resp[None, None, :, 1]
        q = np.einsum("ijk,k->ij", resid**2, w - 1.0)
        i, j = np.unravel_index(np.argmin(q), q.shape)
        assert abs(b0[i] - beta[0]) <= 1e-3
        assert abs(b1[j] - beta[1]) <= 1e-3

    def test_all_unit_weights_singular(self):
        basis = _intercept_basis(3)
        delta = np.array([1, 1, 0])
        y = np.array([1.0, 2.0, np.nan])
        with pytest.raises(SingularNormalEquations):
            ibc_beta(basis, y, np.ones(2), delta)


class TestLemmaIdentity:
    def test_weighting_equals_imputation(self, rng):
        # For any calibrated weights and the bias-calibrated beta, the weighted
        # sum equals the imputation sum.
        for k in range(5):
            ds, basis, design = make_instance(rng, n=100 + 10 * k, L=2)
            dhat = 1.0 + rng.uniform(0.2, 2.5, size=ds.n)
            solve = solve_aps_lambda(basis, dhat, ds.delta)
            ws = aps_weights(basis, dhat, solve.lam, ds.delta)
            beta = ibc_beta(basis, ds.outcome, ws, ds.delta)
            mask = ds.respondent_mask
            lhs = np.sum(ws.weights * ds.outcome[mask])
            pred = basis.values @ beta
            rhs = np.sum(np.where(mask, np.nan_to_num(ds.outcome), pred))
            assert abs(lhs - rhs) <= 1e-6 * ds.n
