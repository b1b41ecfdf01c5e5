"""Posterior value/gradient/Hessian and the structured trace contractions,
checked against finite differences and the dense brute-force oracle."""

import math

import numpy as np
import pytest

from conftest import finite_difference_gradient, finite_difference_jacobian, rel_err
from softabs_gp import lbfgs, rrgp
from softabs_gp.posterior import (
    DomainError,
    ParamVector,
    PosteriorTarget,
    dense_oracle,
    gradient,
    hessian,
    neg_log_posterior,
    trace_contractions,
)


def _random_point(target, rng, scale=0.3):
    return scale * rng.standard_normal(target.dim)


class TestNegLogPosterior:
    def test_tau_zero_is_prior_only(self, logistic_target):
        rng = np.random.default_rng(0)
        q = _random_point(logistic_target, rng)
        val0 = neg_log_posterior(
            q, logistic_target.model, logistic_target.data, tau=0.0
        )
        val1 = neg_log_posterior(
            q, logistic_target.model, logistic_target.data, tau=1.0
        )
        lik = -logistic_target.log_likelihood(q)
        # tau=1 value = tau=0 value + sum of likelihood potentials
        assert val1 == pytest.approx(val0 + lik, rel=1e-12)

    def test_zero_point_logistic_likelihood_part(self, logistic_target):
        # q = 0 means f = 0 (theta = 1 under the log transform): U_i = ln 2
        q = np.zeros(logistic_target.dim)
        n = logistic_target.data.n
        lik = -logistic_target.log_likelihood(q)
        assert lik == pytest.approx(n * math.log(2.0), rel=1e-12)

    def test_prior_quadratic_scaling_in_coefficients(self, logistic_target):
        rng = np.random.default_rng(1)
        q1 = np.zeros(logistic_target.dim)
        q2 = np.zeros(logistic_target.dim)
        coef = 0.4 * rng.standard_normal(31)
        q1[:31] = coef
        q2[:31] = 2.0 * coef
        args = (logistic_target.model, logistic_target.data)
        base = neg_log_posterior(np.zeros(logistic_target.dim), *args, tau=0.0)
        v1 = neg_log_posterior(q1, *args, tau=0.0) - base
        v2 = neg_log_posterior(q2, *args, tau=0.0) - base
        assert v2 == pytest.approx(4.0 * v1, rel=1e-10)

    def test_identity_transform_rejects_nonpositive_hypers(self):
        data, _ = rrgp.simulate_logistic(1, n=25, seed=1)
        model = rrgp.build_model("logistic", data.x, hyper_transform="identity")
        target = PosteriorTarget(model, data)
        q = target.initial_point()
        q[target.layout.hyper_index["c_g"]] = -0.5
        with pytest.raises(DomainError):
            target.at(q).potential()

    def test_param_vector_validation(self):
        with pytest.raises(ValueError):
            ParamVector(np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), tau=1.5)


class TestGradient:
    def test_matches_finite_differences_logistic(self, logistic_target):
        rng = np.random.default_rng(2)
        args = (logistic_target.model, logistic_target.data)
        for _ in range(3):
            q = _random_point(logistic_target, rng)
            fd = finite_difference_gradient(lambda v: neg_log_posterior(v, *args), q)
            assert rel_err(gradient(q, *args), fd) < 1e-6

    def test_matches_finite_differences_meanvar(self, meanvar_toy):
        model, data = meanvar_toy
        rng = np.random.default_rng(3)
        target = PosteriorTarget(model, data)
        for _ in range(3):
            q = _random_point(target, rng)
            fd = finite_difference_gradient(
                lambda v: neg_log_posterior(v, model, data), q
            )
            assert rel_err(gradient(q, model, data), fd) < 1e-6

    def test_prior_gradient_of_coefficients(self):
        # tau=0, identity transform: d/da of a^2/(2 c V) is a/(c V)
        data, _ = rrgp.simulate_logistic(1, n=25, seed=4)
        model = rrgp.build_model("logistic", data.x, hyper_transform="identity")
        target = PosteriorTarget(model, data)
        rng = np.random.default_rng(5)
        q = target.initial_point()
        q[:30] = rng.standard_normal(30)
        c = 1.7
        sigma = 0.8
        q[target.layout.hyper_index["c_g"]] = c
        q[target.layout.hyper_index["sigma_g"]] = sigma
        g = gradient(q, model, data, tau=0.0)
        v = np.array([rrgp.spectral_variance(m, sigma, 8.0) for m in range(1, 31)])
        assert np.allclose(g[:30], q[:30] / (c * v), rtol=1e-12)

    def test_vanishes_at_optimum(self):
        # d=14 toy: small feature count keeps the MAP well conditioned
        data, _ = rrgp.simulate_logistic(1, n=60, seed=19)
        model = rrgp.build_model("logistic", data.x, feature_count=10)
        target = PosteriorTarget(model, data)

        def value_and_grad(q):
            try:
                state = target.at(q)
                return state.potential(), state.gradient()
            except (DomainError, FloatingPointError):
                return math.inf, np.zeros(target.dim)

        res = lbfgs.minimize(value_and_grad, target.initial_point(), gtol=1e-7)
        assert res.converged
        assert np.linalg.norm(gradient(res.x, model, data)) <= 1e-6 * target.dim


class TestHessian:
    def test_exact_symmetry(self, logistic_target):
        rng = np.random.default_rng(6)
        q = _random_point(logistic_target, rng)
        h = hessian(q, logistic_target.model, logistic_target.data)
        # zero up to summation order in the BLAS products
        assert np.max(np.abs(h - h.T)) <= 1e-12 * np.max(np.abs(h))

    def test_prior_coefficient_block_identity_transform(self):
        data, _ = rrgp.simulate_logistic(1, n=25, seed=4)
        model = rrgp.build_model("logistic", data.x, hyper_transform="identity")
        target = PosteriorTarget(model, data)
        q = target.initial_point()
        c, sigma = 0.9, 1.4
        q[target.layout.hyper_index["c_g"]] = c
        q[target.layout.hyper_index["sigma_g"]] = sigma
        h = hessian(q, model, data, tau=0.0)
        v = np.array([rrgp.spectral_variance(m, sigma, 8.0) for m in range(1, 31)])
        assert np.allclose(np.diag(h)[:30], 1.0 / (c * v), rtol=1e-12)
        off = h[:30, :30] - np.diag(np.diag(h)[:30])
        assert np.max(np.abs(off)) == 0.0

    def test_matches_gradient_finite_differences(self, logistic_target):
        rng = np.random.default_rng(7)
        args = (logistic_target.model, logistic_target.data)
        q = _random_point(logistic_target, rng)
        fd = finite_difference_jacobian(lambda v: gradient(v, *args), q)
        fd = 0.5 * (fd + fd.T)
        assert rel_err(hessian(q, *args), fd) < 1e-5


class TestTraceContractions:
    @pytest.mark.parametrize("tau", [1.0, 0.35])
    def test_agrees_with_dense_oracle(self, logistic_target, tau):
        rng = np.random.default_rng(8)
        q = _random_point(logistic_target, rng)
        d = logistic_target.dim
        w1 = rng.standard_normal((d, d))
        w1 = 0.5 * (w1 + w1.T)
        w2 = rng.standard_normal((d, d))
        w2 = 0.5 * (w2 + w2.T)
        args = (logistic_target.model, logistic_target.data)
        t1, t2 = trace_contractions(w1, w2, q, *args, tau=tau)
        ref1 = dense_oracle(w1, q, *args, tau=tau)
        ref2 = dense_oracle(w2, q, *args, tau=tau)
        assert rel_err(t1, ref1) < 1e-8
        assert rel_err(t2, ref2) < 1e-8

    def test_agrees_on_meanvar_model(self, meanvar_toy):
        model, data = meanvar_toy
        target = PosteriorTarget(model, data)
        rng = np.random.default_rng(9)
        q = _random_point(target, rng)
        w = rng.standard_normal((target.dim, target.dim))
        w = 0.5 * (w + w.T)
        t1, _ = trace_contractions(w, np.zeros_like(w), q, model, data)
        assert rel_err(t1, dense_oracle(w, q, model, data)) < 1e-8

    def test_agrees_with_fixed_hyperparameters(self, conjugate_case):
        target = conjugate_case.target
        rng = np.random.default_rng(10)
        q = 0.3 * rng.standard_normal(target.dim)
        w = rng.standard_normal((target.dim, target.dim))
        w = 0.5 * (w + w.T)
        t1, _ = trace_contractions(
            w, np.zeros_like(w), q, conjugate_case.model, conjugate_case.data
        )
        ref = dense_oracle(w, q, conjugate_case.model, conjugate_case.data)
        assert rel_err(t1, ref) < 1e-8

    def test_zero_weights_give_zero(self, logistic_target):
        rng = np.random.default_rng(11)
        q = _random_point(logistic_target, rng)
        z = np.zeros((logistic_target.dim, logistic_target.dim))
        t1, t2 = trace_contractions(
            z, z, q, logistic_target.model, logistic_target.data
        )
        assert np.all(t1 == 0.0) and np.all(t2 == 0.0)

    def test_prior_only_coefficient_entries_analytic(self):
        # tau=0, identity transform: for a coefficient coordinate i the only
        # q_i-dependence of H sits in the hyper blocks, so
        # t_i = 2 W[i, hyper] dr_i/dtheta + W[hyper, hyper] a_i d2r_i/dtheta2
        data, _ = rrgp.simulate_logistic(1, n=20, seed=12)
        model = rrgp.build_model("logistic", data.x, hyper_transform="identity")
        target = PosteriorTarget(model, data)
        rng = np.random.default_rng(13)
        q = target.initial_point()
        q[:31] = 0.5 * rng.standard_normal(31)
        c, sigma = 1.3, 0.9
        hc = target.layout.hyper_index["c_g"]
        hs = target.layout.hyper_index["sigma_g"]
        q[hc], q[hs] = c, sigma
        w = rng.standard_normal((target.dim, target.dim))
        w = 0.5 * (w + w.T)
        t1, _ = trace_contractions(w, np.zeros_like(w), q, model, data, tau=0.0)
        v = np.array([rrgp.spectral_variance(m, sigma, 8.0) for m in range(1, 31)])
        lam = np.array([(np.pi * m / 16.0) ** 2 / 4.0 for m in range(1, 31)])
        r = 1.0 / (c * v)
        dr_dc = -r / c
        dr_ds = r * (lam - 0.5 / sigma)
        d2r_dc2 = 2.0 * r / c**2
        d2r_ds2 = r * ((lam - 0.5 / sigma) ** 2 + 0.5 / sigma**2)
        d2r_dcds = -dr_ds / c
        for i in range(30):
            expected = 2.0 * (w[i, hc] * dr_dc[i] + w[i, hs] * dr_ds[i]) + q[i] * (
                w[hc, hc] * d2r_dc2[i]
                + w[hs, hs] * d2r_ds2[i]
                + 2.0 * w[hc, hs] * d2r_dcds[i]
            )
            assert t1[i] == pytest.approx(expected, rel=1e-9, abs=1e-12)


class TestDenseOracle:
    def test_identity_weights_match_hessian_trace_differences(self, conjugate_case):
        target = conjugate_case.target
        rng = np.random.default_rng(14)
        q = 0.2 * rng.standard_normal(target.dim)
        args = (conjugate_case.model, conjugate_case.data)
        t = dense_oracle(np.eye(target.dim), q, *args)
        step = 1e-5
        for i in range(0, target.dim, 3):
            e = np.zeros(target.dim)
            e[i] = step
            fd = (
                np.trace(hessian(q + e, *args)) - np.trace(hessian(q - e, *args))
            ) / (2 * step)
            assert t[i] == pytest.approx(fd, rel=1e-6, abs=1e-6)

    def test_symmetrisation_invariance(self, logistic_target):
        rng = np.random.default_rng(15)
        q = _random_point(logistic_target, rng)
        w = rng.standard_normal((logistic_target.dim, logistic_target.dim))
        args = (logistic_target.model, logistic_target.data)
        sym = 0.5 * (w + w.T)
        assert np.allclose(
            dense_oracle(sym, q, *args), dense_oracle(sym.copy(), q, *args)
        )

    def test_dimension_guard(self):
        data, _ = rrgp.simulate_logistic(8, n=20, seed=16)
        model = rrgp.build_model("logistic", data.x)
        target = PosteriorTarget(model, data)
        assert target.dim > 200
        with pytest.raises(ValueError):
            dense_oracle(
                np.eye(target.dim), np.zeros(target.dim), model, data
            )


class TestTemperatureSharing:
    def test_tempered_targets_share_static_structure(self, logistic_target):
        warm = logistic_target.at_temperature(0.5)
        assert warm.cache is logistic_target.cache
        assert warm.layout is logistic_target.layout
        rng = np.random.default_rng(17)
        q = _random_point(logistic_target, rng)
        v_half = warm.at(q).potential()
        v0 = neg_log_posterior(
            q, logistic_target.model, logistic_target.data, tau=0.0
        )
        v1 = neg_log_posterior(
            q, logistic_target.model, logistic_target.data, tau=1.0
        )
        assert v_half == pytest.approx(0.5 * (v0 + v1), rel=1e-12)

    def test_temperature_bounds(self, logistic_target):
        with pytest.raises(ValueError):
            logistic_target.at_temperature(1.2)


class TestPriorScales:
    def test_matches_prior_hessian_diagonal(self, logistic_target):
        rng = np.random.default_rng(18)
        q = _random_point(logistic_target, rng)
        scales = logistic_target.prior_scales(q)
        h0 = hessian(
            np.where(np.arange(logistic_target.dim) < 31, 0.0, q),
            logistic_target.model,
            logistic_target.data,
            tau=0.0,
        )
        # coefficient diagonal of the prior Hessian is exactly 1/scale^2
        assert np.allclose(np.diag(h0)[:30], 1.0 / scales[:30] ** 2, rtol=1e-10)
