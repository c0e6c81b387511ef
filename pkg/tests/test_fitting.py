"""Newton/PWLS solver: normal equations, traces, GACV, tuning."""

import numpy as np
import pytest

from absplines.families import Binomial, Gaussian, Poisson
from absplines.fitting import (
    ConfigurationError,
    NewtonControl,
    SearchConfig,
    assemble,
    fit_model,
    gacv,
    newton_fit,
    predict,
    pwls_solve,
    smoothing_traces,
    tune,
)
from absplines.kernels import cubic_kernel
from absplines.model import Covariate, Dataset, build_model
from absplines.sampling import adaptive_sample, uniform_sample

from conftest import manual_basis


def full_basis(n):
    return manual_basis(np.arange(n))


def dense_smoother(S, R, Q, w, n, lam):
    """Reference smoothing matrix A_w via an explicit pseudo-inverse."""
    X = np.hstack([S, R])
    Xw = X * np.sqrt(w)[:, None]
    m = S.shape[1]
    H = Xw.T @ Xw
    H[m:, m:] += n * lam * Q
    return Xw @ np.linalg.pinv(H) @ Xw.T


class TestAssemble:
    def test_full_anchor_set_r_equals_q(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec, full_basis(n), [1.0])
        assert R.shape == (n, n)
        np.testing.assert_allclose(R, Q, atol=1e-12)
        assert S.shape == (n, 2)

    def test_theta_doubling(self, cubic_spec, gaussian_toy):
        basis = manual_basis([0, 5, 9])
        S1, R1, Q1 = assemble(gaussian_toy, cubic_spec, basis, [1.0])
        S2, R2, Q2 = assemble(gaussian_toy, cubic_spec, basis, [2.0])
        np.testing.assert_allclose(R2, 2 * R1, atol=1e-14)
        np.testing.assert_allclose(Q2, 2 * Q1, atol=1e-14)
        np.testing.assert_allclose(S2, S1, atol=0)

    def test_three_point_toy_matches_kernel(self, cubic_spec):
        x = np.array([0.2, 0.5, 0.9])
        ds = Dataset({"x": x}, np.zeros(3))
        _, _, Q = assemble(ds, cubic_spec, full_basis(3), [1.0])
        expected = cubic_kernel(x[:, None], x[None, :])
        np.testing.assert_allclose(Q, expected, atol=1e-14)

    def test_rejects_nonpositive_theta(self, cubic_spec, gaussian_toy):
        with pytest.raises(ConfigurationError):
            assemble(gaussian_toy, cubic_spec, full_basis(gaussian_toy.n),
                     [0.0])


class TestPwlsSolve:
    def test_huge_lambda_kills_kernel_part(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec, full_basis(n), [1.0])
        w = np.ones(n)
        d, c = pwls_solve(S, R, Q, w, gaussian_toy.y, n, 1e12)
        assert np.max(np.abs(R @ c)) < 1e-6
        d_ols, *_ = np.linalg.lstsq(S, gaussian_toy.y, rcond=None)
        np.testing.assert_allclose(d, d_ols, atol=1e-6)

    def test_normal_equation_residual(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        basis = manual_basis(np.arange(0, n, 5))
        S, R, Q = assemble(gaussian_toy, cubic_spec, basis, [1.0])
        rng = np.random.default_rng(3)
        w = rng.uniform(0.5, 2.0, n)
        lam = 1e-3
        d, c = pwls_solve(S, R, Q, w, gaussian_toy.y, n, lam)
        X = np.hstack([S, R])
        m = S.shape[1]
        H = (X * w[:, None]).T @ X
        H[m:, m:] += n * lam * Q
        rhs = X.T @ (w * gaussian_toy.y)
        coef = np.concatenate([d, c])
        resid = np.linalg.norm(H @ coef - rhs) / np.linalg.norm(rhs)
        assert resid <= 1e-8

    def test_duplicate_anchors_same_fit(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        idx = np.arange(0, n, 4)
        dup = np.concatenate([idx, idx[:3]])
        lam = 1e-4
        with pytest.warns(UserWarning, match="rank-deficient|least-norm"):
            fit_dup = newton_fit(gaussian_toy, Gaussian(), cubic_spec,
                                 manual_basis(dup), lam, [1.0])
        fit_ref = newton_fit(gaussian_toy, Gaussian(), cubic_spec,
                             manual_basis(idx), lam, [1.0])
        np.testing.assert_allclose(fit_dup.eta, fit_ref.eta, atol=1e-8)


class TestGaussianOracle:
    def test_matches_dense_full_basis_solve(self, cubic_spec, gaussian_toy):
        # classical smoothing-spline reference: solve the KKT system
        #   [Q + n*lam*I, S; S', 0] [c; d] = [y; 0]
        # whose fitted values S d + Q c must match the solver's to 1e-8
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec, full_basis(n), [1.0])
        for lam in (1e-2, 1e-4):
            m = S.shape[1]
            K = np.zeros((n + m, n + m))
            K[:n, :n] = Q + n * lam * np.eye(n)
            K[:n, n:] = S
            K[n:, :n] = S.T
            rhs = np.concatenate([gaussian_toy.y, np.zeros(m)])
            sol = np.linalg.solve(K, rhs)
            fitted_ref = S @ sol[n:] + Q @ sol[:n]

            fit = newton_fit(gaussian_toy, Gaussian(), cubic_spec,
                             full_basis(n), lam, [1.0])
            assert np.max(np.abs(fit.eta - fitted_ref)) <= 1e-8


class TestNewton:
    def test_gaussian_converges_in_one_step(self, cubic_spec, gaussian_toy):
        fit = newton_fit(gaussian_toy, Gaussian(), cubic_spec,
                         manual_basis(np.arange(0, 80, 4)), 1e-3, [1.0])
        assert fit.converged
        assert fit.newton_iterations == 1

    def test_poisson_constant_only_model(self):
        rng = np.random.default_rng(4)
        y = rng.poisson(5.0, 60).astype(float)
        ds = Dataset({"x": rng.uniform(0, 1, 60)}, y)
        spec = build_model([Covariate("x", "continuous")], [])
        fit = newton_fit(ds, Poisson(), spec, manual_basis([0]), 1.0, [])
        assert fit.converged
        assert fit.d[0] == pytest.approx(np.log(y.mean()), abs=1e-8)

    def test_binomial_recovers_logit_curve(self):
        rng = np.random.default_rng(5)
        n = 200
        x = rng.uniform(0, 1, n)
        p = 1.0 / (1.0 + np.exp(-np.sin(2 * np.pi * x)))
        total = np.full(n, 20.0)
        y = rng.binomial(20, p).astype(float)
        ds = Dataset({"x": x}, y, total=total)
        spec = build_model([Covariate("x", "continuous")], [("x",)])
        fam = Binomial()
        basis = adaptive_sample(ds, fam, nstar=20, seed=1)
        fit = tune(ds, fam, spec, basis)
        assert fit.converged
        p_hat = 1.0 / (1.0 + np.exp(-fit.eta))
        assert np.max(np.abs(p_hat - p)) <= 0.15

    def test_penalized_likelihood_nonincreasing(self):
        rng = np.random.default_rng(6)
        n = 150
        x = rng.uniform(0, 1, n)
        lam_true = np.exp(1.0 + np.sin(2 * np.pi * x))
        y = rng.poisson(lam_true).astype(float)
        ds = Dataset({"x": x}, y)
        spec = build_model([Covariate("x", "continuous")], [("x",)])
        fit = newton_fit(ds, Poisson(), spec,
                         uniform_sample(ds, 15, seed=0), 1e-4, [1.0])
        diffs = np.diff(fit.pl_trajectory)
        assert np.all(diffs <= 1e-12 * (1 + np.abs(fit.pl_trajectory[:-1])))
        assert fit.converged

    def test_self_consistency_of_eta(self, cubic_spec, gaussian_toy):
        basis = manual_basis(np.arange(0, 80, 3))
        fit = newton_fit(gaussian_toy, Gaussian(), cubic_spec, basis,
                         1e-3, [1.0])
        S, R, _ = assemble(gaussian_toy, cubic_spec, basis, fit.thetas)
        np.testing.assert_allclose(fit.eta, S @ fit.d + R @ fit.c, atol=1e-10)

    def test_anchor_permutation_invariance(self, cubic_spec, gaussian_toy):
        idx = np.arange(0, 80, 4)
        basis = manual_basis(idx)
        rng = np.random.default_rng(7)
        perm = rng.permutation(idx.shape[0])
        basis_perm = manual_basis(idx[perm])
        f1 = newton_fit(gaussian_toy, Gaussian(), cubic_spec, basis,
                        1e-3, [1.0])
        f2 = newton_fit(gaussian_toy, Gaussian(), cubic_spec, basis_perm,
                        1e-3, [1.0])
        np.testing.assert_allclose(f2.c, f1.c[perm], atol=1e-8)
        np.testing.assert_allclose(f1.eta, f2.eta, atol=1e-10)

    def test_nstar_below_null_dimension_rejected(self, gaussian_toy):
        spec = build_model(
            [Covariate("x", "continuous"), Covariate("z", "continuous")],
            [("x",), ("z",), ("x", "z")],
        )
        ds = Dataset({"x": gaussian_toy.columns["x"],
                      "z": gaussian_toy.columns["x"][::-1].copy()},
                     gaussian_toy.y)
        with pytest.raises(ConfigurationError, match="null dimension"):
            newton_fit(ds, Gaussian(), spec, manual_basis([0, 1, 2]),
                       1e-3, np.ones(spec.n_theta))

    def test_fitted_deviance_below_null_deviance(self):
        rng = np.random.default_rng(8)
        n = 120
        x = rng.uniform(0, 1, n)
        y = rng.poisson(np.exp(1.0 + np.cos(2 * np.pi * x))).astype(float)
        ds = Dataset({"x": x}, y)
        spec = build_model([Covariate("x", "continuous")], [("x",)])
        fam = Poisson()
        fit = tune(ds, fam, spec, uniform_sample(ds, 14, seed=3))
        null_dev = fam.deviance(np.full(n, fam.constant_eta(y)), y)
        assert fit.deviance <= null_dev + 1e-8


class TestTraces:
    def test_large_lambda_trace_approaches_null_dim(self, cubic_spec,
                                                    gaussian_toy):
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec,
                           manual_basis(np.arange(0, n, 5)), [1.0])
        tr_aw, _ = smoothing_traces(S, R, Q, np.ones(n), n, 1e12)
        assert tr_aw == pytest.approx(S.shape[1], abs=1e-4)

    def test_dense_oracle_traces(self, cubic_spec):
        rng = np.random.default_rng(9)
        n = 30
        x = np.sort(rng.uniform(0, 1, n))
        ds = Dataset({"x": x}, rng.normal(size=n))
        basis = manual_basis(np.arange(0, n, 3))
        S, R, Q = assemble(ds, cubic_spec, basis, [1.0])
        w = rng.uniform(0.5, 3.0, n)
        lam = 1e-3
        A = dense_smoother(S, R, Q, w, n, lam)
        tr_aw, tr_winv = smoothing_traces(S, R, Q, w, n, lam)
        assert tr_aw == pytest.approx(np.trace(A), abs=1e-6)
        assert tr_winv == pytest.approx(np.trace(A @ np.diag(1.0 / w)),
                                        abs=1e-6)
        assert 0 < tr_aw < n

    def test_unit_weights_traces_agree(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec,
                           manual_basis(np.arange(0, n, 6)), [1.0])
        tr_aw, tr_winv = smoothing_traces(S, R, Q, np.ones(n), n, 1e-3)
        assert tr_aw == pytest.approx(tr_winv, abs=1e-10)

    def test_trace_monotone_in_lambda(self, cubic_spec, gaussian_toy):
        n = gaussian_toy.n
        S, R, Q = assemble(gaussian_toy, cubic_spec,
                           manual_basis(np.arange(0, n, 6)), [1.0])
        traces = [smoothing_traces(S, R, Q, np.ones(n), n, lam)[0]
                  for lam in 10.0 ** np.arange(-8, 3)]
        diffs = np.diff(traces)
        assert np.all(diffs <= 1e-8)


class TestGacv:
    def test_dense_oracle_on_five_point_toy(self, cubic_spec):
        x = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
        y = np.array([1.0, 3.0, 0.0, 2.0, 4.0])
        ds = Dataset({"x": x}, y)
        basis = manual_basis([0, 2, 4])
        lam = 0.1
        fam = Poisson()
        fit = newton_fit(ds, fam, cubic_spec, basis, lam, [1.0])
        assert fit.converged

        S, R, Q = assemble(ds, cubic_spec, basis, [1.0])
        mu, w = fam.mean_and_weight(fit.eta)
        w = np.maximum(w, 1e-8)
        A = dense_smoother(S, R, Q, w, 5, lam)
        tr_aw = np.trace(A)
        tr_winv = np.trace(A @ np.diag(1.0 / w))
        score = (-np.mean(y * fit.eta - fam.cumulant(fit.eta))
                 + tr_winv / (5 - tr_aw) * np.mean(y * (y - mu)))
        assert fit.gacv == pytest.approx(score, abs=1e-10)
        assert gacv(fit, ds, fam) == pytest.approx(score, abs=1e-10)

    def test_perfect_mean_match_drops_penalty_term(self, cubic_spec):
        # when y == mu everywhere the score is the mean negative
        # log-likelihood alone
        x = np.array([0.2, 0.4, 0.6, 0.8])
        y = np.array([2.0, 2.0, 2.0, 2.0])
        ds = Dataset({"x": x}, y)
        fam = Poisson()
        fit = newton_fit(ds, fam, cubic_spec, manual_basis([0, 1, 2, 3]),
                         1e-6, [1.0])
        np.testing.assert_allclose(fit.mu, y, atol=1e-6)
        expected = -np.mean(y * fit.eta - fam.cumulant(fit.eta))
        assert fit.gacv == pytest.approx(expected, abs=1e-8)

    def test_oversaturated_sentinel(self, cubic_spec):
        from absplines.fitting import _gacv_score

        fam = Poisson()
        score = _gacv_score(fam, np.array([1.0]), None, np.array([0.0]),
                            np.array([1.0]), tr_aw=1.0, tr_winv=1.0, n=1)
        assert score == np.inf


class TestTune:
    def test_golden_matches_reference_grid(self, cubic_spec, gaussian_toy):
        basis = manual_basis(np.arange(0, 80, 6))
        fam = Gaussian()
        grid = np.linspace(-8, 2, 41)
        scores = []
        for loglam in grid:
            f = newton_fit(gaussian_toy, fam, cubic_spec, basis,
                           10.0 ** loglam, [1.0])
            scores.append(f.gacv)
        best_grid = grid[int(np.argmin(scores))]
        fit = tune(gaussian_toy, fam, cubic_spec, basis)
        assert abs(np.log10(fit.lam) - best_grid) <= 0.25 + 1e-9
        assert fit.search_trajectory

    def test_flat_gacv_returns_max_smoothing(self, cubic_spec):
        ds = Dataset({"x": np.linspace(0, 1, 40)}, np.full(40, 3.0))
        fit = tune(ds, Gaussian(), cubic_spec,
                   manual_basis(np.arange(0, 40, 4)))
        lo, hi = SearchConfig().log10_lambda
        assert np.log10(fit.lam) == pytest.approx(hi)

    def test_nelder_mead_close_to_coarse_grid(self):
        rng = np.random.default_rng(12)
        n = 120
        x1 = rng.uniform(0, 1, n)
        x2 = rng.uniform(0, 1, n)
        y = (np.sin(2 * np.pi * x1) + 0.1 * np.cos(2 * np.pi * x2)
             + 0.2 * rng.normal(size=n))
        ds = Dataset({"x1": x1, "x2": x2}, y)
        spec = build_model(
            [Covariate("x1", "continuous"), Covariate("x2", "continuous")],
            [("x1",), ("x2",)],
        )
        fam = Gaussian()
        basis = uniform_sample(ds, 14, seed=2)

        grid_best = np.inf
        for t1 in 10.0 ** np.arange(-2, 3):
            for t2 in 10.0 ** np.arange(-2, 3):
                f = tune(ds, fam, spec, basis,
                         SearchConfig(theta_mode="fixed",
                                      theta_init=np.array([t1, t2])))
                grid_best = min(grid_best, f.gacv)
        fit = tune(ds, fam, spec, basis,
                   SearchConfig(theta_mode="nelder_mead", nm_maxfev=120))
        assert fit.gacv <= grid_best + 0.05 * abs(grid_best)

    def test_heuristic_mode_runs(self, gaussian_toy):
        spec = build_model(
            [Covariate("x", "continuous")], [("x",)],
        )
        fit = tune(gaussian_toy, Gaussian(), spec,
                   manual_basis(np.arange(0, 80, 5)),
                   SearchConfig(theta_mode="heuristic"))
        assert fit.converged


class TestPredict:
    def test_training_points_reproduce_fit(self):
        rng = np.random.default_rng(13)
        n = 100
        x = rng.uniform(-3.0, 5.0, n)  # raw scale; pipeline rescales
        y = rng.poisson(np.exp(0.5 + 0.2 * np.sin(x))).astype(float)
        ds = Dataset({"x": x}, y)
        spec = build_model([Covariate("x", "continuous")], [("x",)])
        fit = fit_model(ds, Poisson(), spec, nstar=12, seed=0)
        eta, mu = predict(fit, ds.columns)
        np.testing.assert_allclose(eta, fit.eta, atol=1e-10)
        np.testing.assert_allclose(mu, fit.mu, atol=1e-10)

    def test_out_of_range_clamps_with_warning(self, gaussian_toy, cubic_spec):
        fit = fit_model(gaussian_toy, Gaussian(), cubic_spec, nstar=10, seed=0)
        with pytest.warns(UserWarning, match="clamping"):
            eta, _ = predict(fit, {"x": np.array([-10.0, 10.0])})
        edge_lo, _ = predict(fit, {"x": np.array([
            gaussian_toy.columns["x"].min()])})
        edge_hi, _ = predict(fit, {"x": np.array([
            gaussian_toy.columns["x"].max()])})
        assert eta[0] == pytest.approx(edge_lo[0], abs=1e-12)
        assert eta[1] == pytest.approx(edge_hi[0], abs=1e-12)

    def test_round_trip_through_dict(self, gaussian_toy, cubic_spec):
        from absplines.fitting import FitResult

        fit = fit_model(gaussian_toy, Gaussian(), cubic_spec, nstar=10, seed=0)
        clone = FitResult.from_dict(fit.to_dict())
        eta1, _ = predict(fit, gaussian_toy.columns)
        eta2, _ = predict(clone, gaussian_toy.columns)
        np.testing.assert_allclose(eta1, eta2, atol=0)
