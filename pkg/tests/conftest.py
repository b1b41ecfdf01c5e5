"""Shared fixtures: synthetic datasets, an injectable Gaussian target, and
the conjugate fixture whose evidence has a closed form."""

import dataclasses

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from softabs_gp import rrgp
from softabs_gp.posterior import PosteriorTarget


class QuadraticState:
    def __init__(self, target, q, tau):
        self.q = np.asarray(q, dtype=float)
        self._t = target
        self._tau = tau

    def potential(self):
        r = self.q - self._t.mean
        u = 0.5 * float(r @ self._t.precision @ r)
        return u - self._tau * self._t.loglik_const

    def gradient(self):
        return self._t.precision @ (self.q - self._t.mean)

    def hessian(self):
        return self._t.precision.copy()

    def trace_single(self, w):
        # constant Hessian: dH/dq = 0
        return np.zeros(self._t.dim)


class QuadraticTarget:
    """Gaussian 'posterior' with constant Hessian, injectable into the
    sampler and the evidence machinery.

    ``loglik_const`` makes log_likelihood a constant, the degenerate case
    where thermodynamic integration is exact.
    """

    def __init__(self, precision, mean=None, loglik_const=0.0, tau=1.0):
        self.precision = np.asarray(precision, dtype=float)
        self.dim = self.precision.shape[0]
        self.mean = np.zeros(self.dim) if mean is None else np.asarray(mean, dtype=float)
        self.loglik_const = float(loglik_const)
        self.tau = float(tau)

    def initial_point(self):
        return np.zeros(self.dim)

    def at(self, q):
        return QuadraticState(self, q, self.tau)

    def at_temperature(self, tau):
        return QuadraticTarget(self.precision, self.mean, self.loglik_const, tau)

    def log_likelihood(self, q):
        return self.loglik_const


@dataclasses.dataclass(frozen=True)
class ConjugateCase:
    """Fixed-hyperparameter Gaussian-likelihood model with analytic evidence."""

    model: object
    data: object
    target: object
    closed_form: float
    c0: float
    s0: float
    feature_count: int


def _conjugate_closed_form(model, data, c0, s0, m):
    """ln P(y) by exact Gaussian marginalisation over (a, b1) and 40-node
    Gauss-Hermite quadrature over the variance intercept b2 ~ N(0, Sigma)."""
    x = data.x[:, 0]
    y = data.y
    n = y.shape[0]
    sig = model.intercept_variance
    phi = np.array(
        [[rrgp.feature_value(mm, xv, 8.0) for mm in range(1, m + 1)] for xv in x]
    )
    v = np.array([rrgp.spectral_variance(mm, s0, 8.0) for mm in range(1, m + 1)])
    k_base = c0 * (phi * v[None, :]) @ phi.T + sig * np.ones((n, n))

    def gaussian_marginal(b2):
        k = k_base + (model.variance_floor + np.exp(b2)) * np.eye(n)
        _, logdet = np.linalg.slogdet(2.0 * np.pi * k)
        return -0.5 * float(y @ np.linalg.solve(k, y)) - 0.5 * logdet

    nodes, weights = hermegauss(40)
    vals = np.array([gaussian_marginal(b) for b in np.sqrt(sig) * nodes])
    peak = vals.max()
    return peak + np.log(np.sum(weights * np.exp(vals - peak))) - 0.5 * np.log(2.0 * np.pi)


@pytest.fixture(scope="session")
def conjugate_case():
    rng = np.random.default_rng(5)
    n, m = 40, 8
    x = rng.standard_normal((n, 1))
    y = np.sin(1.5 * x[:, 0]) + 0.3 * rng.standard_normal(n)
    data = rrgp.Dataset(x, y)
    c0, s0 = 1.3, 2.1
    model = rrgp.build_model(
        "nl-mean",
        x,
        feature_count=m,
        intercept_variance=1e-4,
        fixed_hypers={"c_g": c0, "sigma_g": s0, "c_l": 1.0},
    )
    closed = _conjugate_closed_form(model, data, c0, s0, m)
    return ConjugateCase(
        model=model,
        data=data,
        target=PosteriorTarget(model, data),
        closed_form=closed,
        c0=c0,
        s0=s0,
        feature_count=m,
    )


@pytest.fixture(scope="session")
def logistic_small():
    """D=1 logistic problem at reduced n; d = 34 like the benchmark."""
    data, truth = rrgp.simulate_logistic(1, n=120, seed=7)
    model = rrgp.build_model("logistic", data.x)
    return model, data, truth


@pytest.fixture(scope="session")
def logistic_target(logistic_small):
    model, data, _ = logistic_small
    return PosteriorTarget(model, data)


@pytest.fixture(scope="session")
def meanvar_toy():
    """Small heteroscedastic problem: one continuous + one binary covariate."""
    data, _ = rrgp.simulate_meanvar(1, 1, n=60, seed=21)
    model = rrgp.build_model("nl-meanvar", data.x, feature_count=8)
    return model, data


def finite_difference_gradient(fun, q, step=1e-6):
    q = np.asarray(q, dtype=float)
    out = np.empty(q.shape[0])
    for i in range(q.shape[0]):
        e = np.zeros(q.shape[0])
        e[i] = step
        out[i] = (fun(q + e) - fun(q - e)) / (2.0 * step)
    return out


def finite_difference_jacobian(fun, q, step=1e-6):
    q = np.asarray(q, dtype=float)
    cols = []
    for i in range(q.shape[0]):
        e = np.zeros(q.shape[0])
        e[i] = step
        cols.append((fun(q + e) - fun(q - e)) / (2.0 * step))
    return np.column_stack(cols)


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(approx - exact))) / scale
