"""Soft-absolute-value Riemannian metric built from posterior Hessians.

The metric is G = Psi diag(g(lambda)) Psi^T where (lambda, Psi) is the
eigensystem of the Hessian and g smoothly maps eigenvalues onto positive
magnitudes.  Eigensystems come from an in-house cyclic Jacobi solver: a cold
(static) decomposition from the identity, or a warm (dynamic) one that
diagonalises the new Hessian in the previous step's eigenbasis, where it is
already near-diagonal and converges in very few sweeps.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import _jacobi

# Eigenvalue pairs closer than kappa times this use the derivative branch of
# the divided-difference matrix.
EQUAL_EIGENVALUE_FACTOR = 1e-10

DEFAULT_SWEEP_CAP = 30
DEFAULT_GS_INTERVAL = 10


class JacobiError(RuntimeError):
    """Eigendecomposition failed to converge within the sweep budget."""


def softabs(eigenvalues, kappa):
    """Smooth positive surrogate sqrt(kappa^2 + lambda^2) for |lambda|."""
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    lam = np.asarray(eigenvalues, dtype=float)
    return np.sqrt(kappa * kappa + lam * lam)


def softabs_deriv(eigenvalues, kappa):
    """Derivative lambda / sqrt(kappa^2 + lambda^2) of the smoothing map."""
    lam = np.asarray(eigenvalues, dtype=float)
    return lam / softabs(lam, kappa)


def t_matrix(eigenvalues, kappa):
    """Divided differences T_jl = (g(l_j) - g(l_l)) / (l_j - l_l).

    Pairs with |l_j - l_l| <= kappa * 1e-10 take the limiting value
    g'(l_j), which also covers the diagonal.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    g = softabs(lam, kappa)
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) <= kappa * EQUAL_EIGENVALUE_FACTOR
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (g[:, None] - g[None, :]) / diff
    deriv = lam / g
    return np.where(close, deriv[:, None], ratio)


@dataclasses.dataclass(frozen=True)
class MetricState:
    """Eigensystem of a Hessian together with its smoothed spectrum."""

    eigenvalues: np.ndarray
    vectors: np.ndarray
    softabs_values: np.ndarray
    logdet: float
    kappa: float
    sweep_count: int
    steps_since_refresh: int = 0

    def __post_init__(self):
        d = self.eigenvalues.shape[0]
        if self.vectors.shape != (d, d):
            raise ValueError("eigenvector matrix shape mismatch")
        if self.softabs_values.shape != (d,):
            raise ValueError("softabs value shape mismatch")

    @property
    def dim(self):
        return self.eigenvalues.shape[0]


@dataclasses.dataclass(frozen=True)
class BetancourtCache:
    """Per-(metric, momentum) quantities reused across trace contractions.

    ``w2`` depends on the metric alone; ``w1`` also depends quadratically on
    the momentum, so during an implicit momentum solve only ``w1`` changes.
    """

    t: np.ndarray
    b: np.ndarray
    r: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


def _decompose(a, v, hnorm, zeta, sweep_cap):
    tol = zeta * hnorm
    skip = tol / a.shape[0] if a.shape[0] else 0.0
    sweeps = _jacobi.jacobi_sweeps(a, v, tol, skip, sweep_cap)
    if sweeps < 0:
        raise JacobiError(
            f"Jacobi failed to reach off-norm {tol:.3e} in {sweep_cap} sweeps"
        )
    return sweeps


def static_eigendecompose(hessian, zeta, sweep_cap=DEFAULT_SWEEP_CAP):
    """Cold cyclic Jacobi from the identity basis.

    Returns (eigenvalues, vectors, sweeps); eigenvalues keep the diagonal
    order the sweeps leave them in, which is what warm restarts want.
    """
    h = np.asarray(hessian, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("hessian must be square")
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    a = 0.5 * (h + h.T)
    hnorm = np.linalg.norm(a)
    v = np.eye(h.shape[0])
    sweeps = _decompose(a, v, hnorm, zeta, sweep_cap)
    return np.diagonal(a).copy(), v, sweeps


def metric_from_hessian(hessian, kappa, zeta, sweep_cap=DEFAULT_SWEEP_CAP):
    """Build a MetricState by a static decomposition of ``hessian``."""
    lam, psi, sweeps = static_eigendecompose(hessian, zeta, sweep_cap)
    g = softabs(lam, kappa)
    return MetricState(
        eigenvalues=lam,
        vectors=psi,
        softabs_values=g,
        logdet=float(np.sum(np.log(g))),
        kappa=kappa,
        sweep_count=sweeps,
        steps_since_refresh=0,
    )


def dynamic_eigendecompose(
    hessian,
    previous,
    zeta,
    sweep_cap=DEFAULT_SWEEP_CAP,
    gs_interval=DEFAULT_GS_INTERVAL,
):
    """Warm-started decomposition of ``hessian`` in ``previous``'s basis.

    Rotates the new Hessian into the previous eigenbasis, finishes the
    diagonalisation there, and composes the rotations.  Every
    ``gs_interval``-th call re-orthonormalises the carried basis with
    modified Gram-Schmidt before use, bounding drift from repeated
    composition.
    """
    h = np.asarray(hessian, dtype=float)
    d = previous.dim
    if h.shape != (d, d):
        raise ValueError("hessian shape does not match metric")
    psi = previous.vectors
    since = previous.steps_since_refresh + 1
    if gs_interval and since >= gs_interval:
        psi = psi.copy()
        _jacobi.modified_gram_schmidt(psi)
        since = 0
    a = psi.T @ h @ psi
    a = 0.5 * (a + a.T)
    hnorm = np.linalg.norm(h)
    q = np.eye(d)
    sweeps = _decompose(a, q, hnorm, zeta, sweep_cap)
    lam = np.diagonal(a).copy()
    g = softabs(lam, previous.kappa)
    return MetricState(
        eigenvalues=lam,
        vectors=psi @ q,
        softabs_values=g,
        logdet=float(np.sum(np.log(g))),
        kappa=previous.kappa,
        sweep_count=sweeps,
        steps_since_refresh=since,
    )


def w1_matrix(metric, momentum, t=None):
    """Momentum-coupled contraction matrix Psi (b b^T * T) Psi^T, b = g^-1 Psi^T p."""
    p = np.asarray(momentum, dtype=float)
    psi = metric.vectors
    b = (psi.T @ p) / metric.softabs_values
    if t is None:
        t = t_matrix(metric.eigenvalues, metric.kappa)
    # a blown-up trajectory can overflow here; the sampler rejects it on the
    # non-finite Hamiltonian, so keep the intermediate arithmetic quiet
    with np.errstate(over="ignore", invalid="ignore"):
        return psi @ ((b[:, None] * t) * b[None, :]) @ psi.T


def w2_matrix(metric):
    """Metric-only contraction matrix Psi diag(g'(lambda)/g(lambda)) Psi^T."""
    ratio = softabs_deriv(metric.eigenvalues, metric.kappa) / metric.softabs_values
    return (metric.vectors * ratio[None, :]) @ metric.vectors.T


def build_cache(metric, momentum):
    """Assemble the trace-contraction matrices for one (metric, momentum)."""
    p = np.asarray(momentum, dtype=float)
    psi = metric.vectors
    g = metric.softabs_values
    b = (psi.T @ p) / g
    t = t_matrix(metric.eigenvalues, metric.kappa)
    w1 = psi @ ((b[:, None] * t) * b[None, :]) @ psi.T
    return BetancourtCache(t=t, b=b, r=1.0 / g, w1=w1, w2=w2_matrix(metric))


def metric_apply(metric, vector):
    """G v without forming G."""
    return metric.vectors @ (metric.softabs_values * (metric.vectors.T @ vector))


def metric_apply_inverse(metric, vector):
    """G^{-1} v without forming G^{-1}."""
    return metric.vectors @ ((metric.vectors.T @ vector) / metric.softabs_values)


def metric_quadratic(metric, momentum):
    """p^T G^{-1} p, the kinetic quadratic form."""
    u = metric.vectors.T @ np.asarray(momentum, dtype=float)
    return float(np.sum(u * u / metric.softabs_values))


def metric_logdet(metric):
    return metric.logdet


def sample_momentum(metric, rng):
    """Draw p ~ N(0, G) through the factor Psi diag(sqrt(g))."""
    z = rng.standard_normal(metric.dim)
    return metric.vectors @ (np.sqrt(metric.softabs_values) * z)


def reconstruct(metric):
    """Psi diag(lambda) Psi^T, for drift checks against the true Hessian."""
    psi = metric.vectors
    return (psi * metric.eigenvalues[None, :]) @ psi.T


def log_2pi_volume(metric):
    """The 0.5 * (d ln 2pi + ln|G|) normalisation term of the Hamiltonian."""
    return 0.5 * (metric.dim * math.log(2.0 * math.pi) + metric.logdet)
