"""Tempered posterior evaluation with derivatives up to third order.

The sampled vector q stacks coefficient blocks, intercepts, and (transformed)
hyperparameters as laid out by BlockLayout.  The negative log posterior is

    U(q) = tau * sum_i U_i(f(x_i)) - ln G_theta(a) - ln Pi(theta)

with the temperature tau scaling the likelihood only.  Under the default log
transform the sampled coordinates are eta = ln theta and the density carries
the change-of-variables Jacobian, folded here into the hyperprior terms.

The Hessian's coefficient block is Phi^T diag(d2U) Phi plus prior diagonals;
hyperparameters couple to coefficients through the prior inverse variances
r_mu(theta) = 1 / (c V_mu(sigma)).  All hyperparameter derivatives run
through rho_mu = ln r_mu, whose partials in the sampled coordinates are
polynomial, so third-order terms come from one exp and a handful of
elementwise products per coefficient.

trace_contractions computes t_i = tr(W dH/dq_i) without materialising any
d x d x d tensor: likelihood terms contract the per-sample third-derivative
diagonal against rowsums of (Phi_j1 W_block) .* Phi_j2, and prior terms reduce
to fancy-indexed reads of W against the r derivative arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rrgp import (
    GAUSSIAN,
    LOGISTIC,
    BlockLayout,
    Dataset,
    FeatureCache,
    ModelSpec,
    potential_derivatives,
)

LN_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Evaluation outside the admissible region (theta <= 0 under identity)."""


class DivergenceError(FloatingPointError):
    """Non-finite state encountered; the enclosing move must be rejected."""


@dataclass
class ParamVector:
    """A point in the sampled coordinates together with its temperature."""

    values: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise ValueError("parameter vector must be 1-d")
        if not np.isfinite(self.values).all():
            raise ValueError("parameter vector has non-finite entries")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"temperature must lie in [0, 1], got {self.tau}")


def _split_param(q, tau):
    if isinstance(q, ParamVector):
        return q.values, q.tau
    q = np.ascontiguousarray(np.asarray(q, dtype=float))
    return q, (1.0 if tau is None else float(tau))


@dataclass(frozen=True)
class _CoefGroup:
    """Coefficient coordinates sharing one kernel kind's hyperparameters."""

    kind: str
    idx: np.ndarray           # global coordinate indices of the coefficients
    hyper_pos: tuple          # global indices of the coupled hyperparameters
    w: np.ndarray             # pi^2 m^2 / (16 L^2) per coefficient (0 for linear)
    fixed: tuple = ()         # theta values when the hyperparameters are fixed


class _HyperPrior:
    """Inverse-gamma negative log density in the sampled coordinate."""

    def __init__(self, alpha, beta, transform):
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.transform = transform
        self.norm = math.lgamma(self.alpha) - self.alpha * math.log(self.beta)

    def derivs(self, h):
        a, b = self.alpha, self.beta
        try:
            if self.transform == "log":
                # density of eta = ln theta; the +eta Jacobian cancels one power
                e = math.exp(-h)
                u0 = a * h + b * e + self.norm
                return u0, a - b * e, b * e, -b * e
            if h <= 0.0:
                raise DomainError(
                    "hyperparameter must be positive under identity transform"
                )
            u0 = (a + 1.0) * math.log(h) + b / h + self.norm
            u1 = (a + 1.0) / h - b / h**2
            u2 = -(a + 1.0) / h**2 + 2.0 * b / h**3
            u3 = 2.0 * (a + 1.0) / h**3 - 6.0 * b / h**4
            return u0, u1, u2, u3
        except (OverflowError, ZeroDivisionError):
            raise DivergenceError("hyperprior overflow") from None


class _GroupDerivs:
    """rho = ln(1 / (c V)) and r = exp(rho) partials for one group.

    Arrays are indexed [a](n), [a,b](n), [a,b,c](n) over the group's sampled
    hyperparameter coordinates (h of them, h <= 2), symmetric in the hyper
    axes.  These drive every hyperparameter coupling in gradient, Hessian,
    and trace contractions.
    """

    def __init__(self, group: _CoefGroup, hvals, transform):
        n = group.idx.size
        h = len(group.hyper_pos)
        d1 = np.zeros((h, n))
        d2 = np.zeros((h, h, n))
        d3 = np.zeros((h, h, h, n))
        w = group.w
        if h == 0:
            # fixed hyperparameters: rho is a constant of the model
            if group.kind == GAUSSIAN:
                c, s = group.fixed
                rho = -math.log(c) - 0.5 * math.log(math.pi) - 0.5 * math.log(s) + s * w
            else:
                (c,) = group.fixed
                rho = np.full(n, -math.log(c))
        elif group.kind == GAUSSIAN:
            c, s = hvals
            if transform == "log":
                try:
                    sw = math.exp(s) * w
                except OverflowError:
                    raise DivergenceError("spectral variance underflow") from None
                rho = -c - 0.5 * math.log(math.pi) - 0.5 * s + sw
                d1[0] = -1.0
                d1[1] = sw - 0.5
                d2[1, 1] = sw
                d3[1, 1, 1] = sw
            else:
                if c <= 0.0 or s <= 0.0:
                    raise DomainError("hyperparameters must be positive")
                rho = -np.log(c) - 0.5 * math.log(math.pi) - 0.5 * math.log(s) + s * w
                d1[0] = -1.0 / c
                d1[1] = w - 0.5 / s
                d2[0, 0] = 1.0 / c**2
                d2[1, 1] = 0.5 / s**2
                d3[0, 0, 0] = -2.0 / c**3
                d3[1, 1, 1] = -1.0 / s**3
        else:
            (c,) = hvals
            if transform == "log":
                rho = np.full(n, -c)
                d1[0] = -1.0
            else:
                if c <= 0.0:
                    raise DomainError("hyperparameters must be positive")
                rho = np.full(n, -math.log(c))
                d1[0] = -1.0 / c
                d2[0, 0] = 1.0 / c**2
                d3[0, 0, 0] = -2.0 / c**3
        # r = inf is caught by the caller as a divergence; silence the
        # intermediate overflow noise here
        with np.errstate(over="ignore", invalid="ignore"):
            r = np.exp(rho)
            self.rho = rho
            self.r = r
            self.rho1, self.rho2, self.rho3 = d1, d2, d3
            # exp chain rule up to third order
            self.r1 = r * d1
            self.r2 = r * (d1[:, None] * d1[None, :] + d2)
            self.r3 = r * (
                d1[:, None, None] * d1[None, :, None] * d1[None, None, :]
                + d2[:, :, None] * d1[None, None, :]
                + d2[:, None, :] * d1[None, :, None]
                + d2[None, :, :] * d1[:, None, None]
                + d3
            )


class PosteriorTarget:
    """Callable bundle for one (model, data, temperature) triple.

    Construction precomputes the layout, design matrices, and the static
    prior structure; ``at`` returns a lazy evaluation state for one point.
    Temperature variants share all static pieces.
    """

    def __init__(self, model: ModelSpec, data: Dataset, tau: float = 1.0, *, _shared=None):
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"temperature must lie in [0, 1], got {tau}")
        if model.likelihood == LOGISTIC:
            data.require_binary_targets()
        self.model = model
        self.data = data
        self.tau = float(tau)
        if _shared is not None:
            self.layout, self.cache, self.groups, self.hyper_priors = _shared
            return
        self.layout = BlockLayout.from_model(model)
        self.cache = FeatureCache(model, data, self.layout)
        gauss_idx, gauss_w, lin_idx = [], [], []
        for j, kernels in enumerate(model.functions):
            for k, kern in enumerate(kernels):
                span = self.layout.coef_slices[(j, k)]
                ids = np.arange(span.start, span.stop)
                if kern.kind == GAUSSIAN:
                    m = np.arange(1, kern.features + 1, dtype=float)
                    gauss_idx.append(ids)
                    gauss_w.append((np.pi * m / (2.0 * kern.half_width)) ** 2 / 4.0)
                else:
                    lin_idx.append(ids)
        groups = []
        hidx = self.layout.hyper_index
        fixed = model.fixed_hypers
        if gauss_idx:
            if "c_g" in hidx:
                pos, vals = (hidx["c_g"], hidx["sigma_g"]), ()
            else:
                pos, vals = (), (fixed["c_g"], fixed["sigma_g"])
            groups.append(
                _CoefGroup(
                    GAUSSIAN,
                    np.concatenate(gauss_idx),
                    pos,
                    np.concatenate(gauss_w),
                    vals,
                )
            )
        if lin_idx:
            idx = np.concatenate(lin_idx)
            if "c_l" in hidx:
                pos, vals = (hidx["c_l"],), ()
            else:
                pos, vals = (), (fixed["c_l"],)
            groups.append(_CoefGroup("linear", idx, pos, np.zeros(idx.size), vals))
        self.groups = groups
        self.hyper_priors = {
            name: _HyperPrior(*model.priors[name], model.hyper_transform)
            for name in hidx
        }

    @property
    def dim(self) -> int:
        return self.layout.dim

    def at_temperature(self, tau: float) -> "PosteriorTarget":
        shared = (self.layout, self.cache, self.groups, self.hyper_priors)
        out = PosteriorTarget(self.model, self.data, tau, _shared=shared)
        return out

    def initial_point(self) -> np.ndarray:
        """Chain start: a = 0, b = 0, theta = 1 in the sampled coordinates."""
        q = np.zeros(self.dim)
        if self.model.hyper_transform == "identity":
            for pos in self.layout.hyper_index.values():
                q[pos] = 1.0
        return q

    def at(self, q) -> "PosteriorState":
        return PosteriorState(self, q)

    def log_likelihood(self, q) -> float:
        """Untempered ln P(X | a); the thermodynamic-integration integrand."""
        return -self.at(q).sum_potentials()

    def hyperprior_potential(self, q) -> float:
        """Hyperprior potential terms alone, for conditional-objective callers."""
        q = np.asarray(q, dtype=float)
        total = 0.0
        for name, prior in self.hyper_priors.items():
            total += prior.derivs(float(q[self.layout.hyper_index[name]]))[0]
        return total

    def prior_scales(self, q) -> np.ndarray:
        """Per-coordinate prior standard deviations at q's hyperparameters.

        Coefficients get 1/sqrt(r) with r the prior inverse variance,
        intercepts sqrt(Sigma), hyperparameter coordinates 1.  Conditional
        optimisers use these to whiten the coefficient block, whose raw
        curvature spans many orders of magnitude across a hyperparameter
        grid.
        """
        q = np.asarray(q, dtype=float)
        scales = np.ones(self.dim)
        transform = self.model.hyper_transform
        for group in self.groups:
            hvals = tuple(q[p] for p in group.hyper_pos)
            gd = _GroupDerivs(group, hvals, transform)
            scales[group.idx] = np.exp(-0.5 * gd.rho)
        for pos in self.layout.intercept_index.values():
            scales[pos] = math.sqrt(self.model.intercept_variance)
        return scales


class PosteriorState:
    """Lazy derivative cache at a single point.

    The sampler evaluates the Hessian many times per step (metric fixed-point
    iterations) but third-order structures only once, so each piece is
    computed on first use and memoised.
    """

    def __init__(self, target: PosteriorTarget, q):
        q = np.ascontiguousarray(np.asarray(q, dtype=float))
        if q.shape != (target.dim,):
            raise ValueError(f"expected point of dimension {target.dim}, got {q.shape}")
        if not np.isfinite(q).all():
            raise DivergenceError("non-finite coordinates")
        self.target = target
        self.q = q
        self._f = None
        self._lik = None
        self._groups = None
        self._hyper = None
        self._value = None
        self._grad = None
        self._hess = None

    # -- raw pieces ------------------------------------------------------

    @property
    def f(self):
        if self._f is None:
            layout = self.target.layout
            phi = self.target.cache.phi
            f = np.empty((self.target.data.n, len(phi)))
            for j, mat in enumerate(phi):
                f[:, j] = mat @ self.q[layout.function_slices[j]]
            if not np.isfinite(f).all():
                raise DivergenceError("non-finite latent function values")
            self._f = f
        return self._f

    @property
    def lik(self):
        if self._lik is None:
            self._lik = potential_derivatives(
                self.target.model.likelihood,
                self.f,
                self.target.data.y,
                variance_floor=self.target.model.variance_floor,
            )
        return self._lik

    @property
    def group_derivs(self):
        if self._groups is None:
            transform = self.target.model.hyper_transform
            out = []
            for g in self.target.groups:
                hvals = tuple(self.q[p] for p in g.hyper_pos)
                gd = _GroupDerivs(g, hvals, transform)
                if not np.isfinite(gd.r).all():
                    raise DivergenceError("prior inverse variance overflow")
                out.append((g, gd))
            self._groups = out
        return self._groups

    @property
    def hyper_derivs(self):
        if self._hyper is None:
            self._hyper = {
                name: self.target.hyper_priors[name].derivs(self.q[pos])
                for name, pos in self.target.layout.hyper_index.items()
            }
        return self._hyper

    def sum_potentials(self) -> float:
        """sum_i U_i at this point, untempered."""
        u = float(np.sum(self.lik[0]))
        if not math.isfinite(u):
            raise DivergenceError("non-finite likelihood potential")
        return u

    # -- posterior value and derivatives ---------------------------------

    def potential(self) -> float:
        if self._value is not None:
            return self._value
        target = self.target
        layout = target.layout
        sigma = target.model.intercept_variance
        val = 0.0
        if target.tau != 0.0:
            val += target.tau * self.sum_potentials()
        for g, gd in self.group_derivs:
            a = self.q[g.idx]
            val += float(
                0.5 * np.dot(a * a, gd.r) - 0.5 * np.sum(gd.rho) + 0.5 * LN_2PI * g.idx.size
            )
        for j, pos in layout.intercept_index.items():
            b = self.q[pos]
            val += 0.5 * b * b / sigma + 0.5 * math.log(2.0 * math.pi * sigma)
        for name, (u0, _, _, _) in self.hyper_derivs.items():
            val += u0
        if not math.isfinite(val):
            raise DivergenceError("non-finite posterior potential")
        self._value = val
        return val

    def gradient(self) -> np.ndarray:
        if self._grad is not None:
            return self._grad
        target = self.target
        layout = target.layout
        grad = np.zeros(target.dim)
        if target.tau != 0.0:
            _, d1, _, _ = self.lik
            for j, mat in enumerate(target.cache.phi):
                grad[layout.function_slices[j]] = target.tau * (mat.T @ d1[:, j])
        for g, gd in self.group_derivs:
            a = self.q[g.idx]
            grad[g.idx] += a * gd.r
            a2 = a * a
            for ai, pos in enumerate(g.hyper_pos):
                grad[pos] += 0.5 * np.dot(a2, gd.r1[ai]) - 0.5 * np.sum(gd.rho1[ai])
        sigma = target.model.intercept_variance
        for j, pos in layout.intercept_index.items():
            grad[pos] += self.q[pos] / sigma
        for name, (_, u1, _, _) in self.hyper_derivs.items():
            grad[layout.hyper_index[name]] += u1
        if not np.isfinite(grad).all():
            raise DivergenceError("non-finite posterior gradient")
        self._grad = grad
        return grad

    def hessian(self) -> np.ndarray:
        if self._hess is not None:
            return self._hess
        target = self.target
        layout = target.layout
        d = target.dim
        hess = np.zeros((d, d))
        if target.tau != 0.0:
            _, _, d2, _ = self.lik
            phi = target.cache.phi
            nj = len(phi)
            for j1 in range(nj):
                s1 = layout.function_slices[j1]
                for j2 in range(j1, nj):
                    s2 = layout.function_slices[j2]
                    block = (phi[j1] * (target.tau * d2[:, j1, j2])[:, None]).T @ phi[j2]
                    hess[s1, s2] += block
                    if j2 != j1:
                        hess[s2, s1] += block.T
        diag = np.einsum("ii->i", hess)
        for g, gd in self.group_derivs:
            a = self.q[g.idx]
            diag[g.idx] += gd.r
            a2 = a * a
            for ai, pi_ in enumerate(g.hyper_pos):
                cross = a * gd.r1[ai]
                hess[g.idx, pi_] += cross
                hess[pi_, g.idx] += cross
                for bi, pj in enumerate(g.hyper_pos):
                    hess[pi_, pj] += 0.5 * np.dot(a2, gd.r2[ai, bi]) - 0.5 * np.sum(
                        gd.rho2[ai, bi]
                    )
        sigma = target.model.intercept_variance
        for j, pos in layout.intercept_index.items():
            diag[pos] += 1.0 / sigma
        for name, (_, _, u2, _) in self.hyper_derivs.items():
            diag[layout.hyper_index[name]] += u2
        if not np.isfinite(hess).all():
            raise DivergenceError("non-finite posterior Hessian")
        self._hess = hess
        return hess

    # -- structured trace contraction -------------------------------------

    def trace_single(self, w: np.ndarray) -> np.ndarray:
        """t_i = tr(W dH/dq_i) for one symmetric W, without dense tensors."""
        target = self.target
        layout = target.layout
        t = np.zeros(target.dim)
        if target.tau != 0.0:
            _, _, _, d3 = self.lik
            phi = target.cache.phi
            nj = len(phi)
            for j1 in range(nj):
                s1 = layout.function_slices[j1]
                for j2 in range(nj):
                    s2 = layout.function_slices[j2]
                    # s holds phi_j1(x_i)^T W_block phi_j2(x_i) per sample
                    s = np.einsum(
                        "ij,ij->i", phi[j1] @ w[s1, s2], phi[j2], optimize=False
                    )
                    for j in range(nj):
                        coef = d3[:, j1, j2, j]
                        if not coef.any():
                            continue
                        t[layout.function_slices[j]] += target.tau * (
                            phi[j].T @ (coef * s)
                        )
        for g, gd in self.group_derivs:
            a = self.q[g.idx]
            a2 = a * a
            diag_w = w[g.idx, g.idx]
            h = len(g.hyper_pos)
            cols = [0.5 * (w[g.idx, p] + w[p, g.idx]) for p in g.hyper_pos]
            hw = np.array(
                [[0.5 * (w[pa, pb] + w[pb, pa]) for pb in g.hyper_pos] for pa in g.hyper_pos]
            )
            # coefficient targets
            acc = np.zeros(g.idx.size)
            for ai in range(h):
                acc += 2.0 * cols[ai] * gd.r1[ai]
                for bi in range(h):
                    acc += hw[ai, bi] * a * gd.r2[ai, bi]
            t[g.idx] += acc
            # hyperparameter targets
            for gi, pos in enumerate(g.hyper_pos):
                val = np.dot(diag_w, gd.r1[gi])
                for ai in range(h):
                    val += 2.0 * np.dot(cols[ai], a * gd.r2[gi, ai])
                    for bi in range(h):
                        val += hw[ai, bi] * (
                            0.5 * np.dot(a2, gd.r3[gi, ai, bi])
                            - 0.5 * np.sum(gd.rho3[gi, ai, bi])
                        )
                t[pos] += val
        for name, (_, _, _, u3) in self.hyper_derivs.items():
            pos = layout.hyper_index[name]
            t[pos] += w[pos, pos] * u3
        if not np.isfinite(t).all():
            raise DivergenceError("non-finite trace contraction")
        return t

    def trace_pair(self, w1: np.ndarray, w2: np.ndarray):
        return self.trace_single(w1), self.trace_single(w2)


# -- module-level API ------------------------------------------------------


def neg_log_posterior(q, model: ModelSpec, data: Dataset, *, tau=None, target=None) -> float:
    q, tau = _split_param(q, tau)
    target = _resolve(target, model, data, tau)
    return target.at(q).potential()


def gradient(q, model: ModelSpec, data: Dataset, *, tau=None, target=None) -> np.ndarray:
    q, tau = _split_param(q, tau)
    target = _resolve(target, model, data, tau)
    return target.at(q).gradient()


def hessian(q, model: ModelSpec, data: Dataset, *, tau=None, target=None) -> np.ndarray:
    q, tau = _split_param(q, tau)
    target = _resolve(target, model, data, tau)
    return target.at(q).hessian()


def trace_contractions(w1, w2, q, model: ModelSpec, data: Dataset, *, tau=None, target=None):
    q, tau = _split_param(q, tau)
    target = _resolve(target, model, data, tau)
    state = target.at(q)
    return state.trace_pair(np.asarray(w1, dtype=float), np.asarray(w2, dtype=float))


def _resolve(target, model, data, tau):
    if target is not None:
        return target if target.tau == tau else target.at_temperature(tau)
    return PosteriorTarget(model, data, tau)


def dense_oracle(
    w,
    q,
    model: ModelSpec,
    data: Dataset,
    *,
    tau=None,
    target=None,
    step: float = 1e-5,
    dim_cap: int = 200,
):
    """Reference trace contraction from finite differences of the Hessian.

    Materialises dH/dq_i by central differences, one coordinate at a time, at
    O(d) Hessian evaluations.  Guarded to d <= dim_cap by default; benchmarks
    that deliberately time the dense path may raise the cap.
    """
    q, tau = _split_param(q, tau)
    target = _resolve(target, model, data, tau)
    d = target.dim
    if d > dim_cap:
        raise ValueError(f"dense_oracle guarded to d <= {dim_cap}, got d = {d}")
    w = np.asarray(w, dtype=float)
    w = 0.5 * (w + w.T)
    t = np.empty(d)
    for i in range(d):
        h = step * max(1.0, abs(q[i]))
        qp = q.copy()
        qp[i] += h
        qm = q.copy()
        qm[i] -= h
        dh = (target.at(qp).hessian() - target.at(qm).hessian()) / (2.0 * h)
        t[i] = float(np.sum(w * dh))
    return t
