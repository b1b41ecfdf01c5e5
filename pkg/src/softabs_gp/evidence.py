"""Bayesian model evidence: thermodynamic integration plus Laplace baselines.

Thermodynamic integration runs chains down a temperature ladder from the
posterior (tau = 1) to the prior (tau = 0) and applies the trapezoid rule to
the expected log likelihood along the way.  Each chain walks the whole
ladder, warm-started rung to rung, and yields an independent evidence
estimate; the spread across chains gives the standard error.

Two Laplace routines serve as cross-checks: a full-parameter quadratic
approximation at the mode, and a brute-force grid marginalisation over the
two Gaussian-kernel hyperparameters with an inner coefficient optimisation
per node.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import math

import numpy as np

from . import lbfgs
from .metric import static_eigendecompose
from .posterior import DivergenceError, DomainError, PosteriorTarget
from .sampler import LN_2PI, ChainConfig, ChainError, run_chain, wilcoxon_split_half

# Jacobi off-norm tolerance for the Laplace log-determinant; matches the
# sampler's default metric tolerance.
LAPLACE_ZETA = 1e-13


@dataclasses.dataclass(frozen=True)
class TemperLadder:
    """Temperature schedule and per-rung sampling effort."""

    taus: np.ndarray
    moves_per_rung: int = 50
    leapfrogs: int = 100
    chains: int = 10

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=float)
        object.__setattr__(self, "taus", taus)
        if taus.ndim != 1 or taus.shape[0] < 2:
            raise ValueError("ladder needs at least two rungs")
        if taus[0] != 1.0 or taus[-1] != 0.0:
            raise ValueError("ladder must start at tau = 1 and end at tau = 0")
        if not np.all(np.diff(taus) < 0.0):
            raise ValueError("ladder temperatures must strictly decrease")
        if self.moves_per_rung < 1 or self.leapfrogs < 1 or self.chains < 1:
            raise ValueError("moves_per_rung, leapfrogs and chains must be positive")

    @property
    def size(self):
        return self.taus.shape[0]

    def thin(self, factor):
        """Coarser ladder keeping every factor-th rung plus both endpoints."""
        if factor < 1:
            raise ValueError("thinning factor must be at least 1")
        idx = list(range(0, self.size, factor))
        if idx[-1] != self.size - 1:
            idx.append(self.size - 1)
        return dataclasses.replace(self, taus=self.taus[idx])


def default_ladder(moves_per_rung=50, leapfrogs=100, chains=10):
    """The 101-rung schedule: dense near the prior where the integrand moves."""
    taus = np.empty(101)
    taus[:41] = 1.0 - 0.02 * np.arange(41)
    taus[41:71] = 0.2 - 0.005 * np.arange(1, 31)
    taus[71:91] = 0.05 - 0.002 * np.arange(1, 21)
    taus[91:] = 0.01 - 0.001 * np.arange(1, 11)
    taus[0] = 1.0
    taus[-1] = 0.0
    return TemperLadder(
        taus=taus, moves_per_rung=moves_per_rung, leapfrogs=leapfrogs, chains=chains
    )


def _trapezoid(values, taus):
    # taus decrease, so -diff gives positive widths
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * -np.diff(taus)))


def ti_variance(rung_variances, ladder):
    """Trapezoid-rule variance propagation from per-rung variances."""
    taus = ladder.taus if hasattr(ladder, "taus") else np.asarray(ladder, dtype=float)
    v = np.asarray(rung_variances, dtype=float)
    if v.shape != taus.shape:
        raise ValueError("need one variance per rung")
    dt = np.diff(taus)
    total = v[0] * dt[0] ** 2 + v[-1] * dt[-1] ** 2
    if v.shape[0] > 2:
        total += float(np.sum(v[1:-1] * (dt[:-1] ** 2 + dt[1:] ** 2)))
    return 0.25 * float(total)


@dataclasses.dataclass
class EvidenceEstimate:
    bme_mean: float
    bme_stderr: float
    per_chain: list
    rung_means: list
    ladder: TemperLadder
    warnings: list
    rung_values: np.ndarray | None = None

    def to_json(self):
        return json.dumps(
            {
                "bme_mean": self.bme_mean,
                "bme_stderr": self.bme_stderr,
                "per_chain": self.per_chain,
                "ladder": [float(t) for t in self.ladder.taus],
                "rung_means": self.rung_means,
                "warnings": self.warnings,
            },
            indent=2,
        )


def _warm_up(target, config, seqs, segment_moves, pvalue, warnings, initial):
    """Sample the posterior in segments until the log-posterior trend is flat."""
    q = target.initial_point() if initial is None else np.asarray(initial, dtype=float)
    for k, seq in enumerate(seqs):
        cfg = dataclasses.replace(
            config, moves=segment_moves, burnin=0, record_q=False, seed=seq
        )
        result = run_chain(target, cfg, initial=q)
        q = result.q_final
        if segment_moves >= 10:
            _, p = wilcoxon_split_half(result.logpost)
            if p > pvalue:
                return q
    warnings.append(f"warm-up trend still visible after {len(seqs)} segments")
    return q


def _ladder_walk(target, ladder, config, q_start, rung_seqs, rung_average):
    values = np.empty(ladder.size)
    q = q_start
    for s, tau in enumerate(ladder.taus):
        tempered = target.at_temperature(float(tau))
        cfg = dataclasses.replace(
            config,
            moves=ladder.moves_per_rung,
            leapfrogs=ladder.leapfrogs,
            burnin=0,
            record_q=rung_average,
            seed=rung_seqs[s],
        )
        result = run_chain(tempered, cfg, initial=q)
        q = result.q_final
        if rung_average:
            values[s] = float(
                np.mean([target.log_likelihood(row) for row in result.sample_matrix()])
            )
        else:
            values[s] = target.log_likelihood(q)
    return values


def _chain_job(args):
    (model, data, ladder, config, q_warm, chain_seq, rung_average, spread_moves, target) = args
    if target is None:
        target = PosteriorTarget(model, data)
    seqs = chain_seq.spawn(ladder.size + 1)
    try:
        q = np.asarray(q_warm, dtype=float)
        if spread_moves > 0:
            cfg = dataclasses.replace(
                config, moves=spread_moves, burnin=0, record_q=False, seed=seqs[0]
            )
            q = run_chain(target, cfg, initial=q).q_final
        values = _ladder_walk(target, ladder, config, q, seqs[1:], rung_average)
        return values, None
    except ChainError as exc:
        return None, str(exc)


def thermo_integrate(
    model,
    data,
    ladder,
    config,
    *,
    rung_average=False,
    warmup_segment_moves=50,
    warmup_max_segments=8,
    warmup_pvalue=0.05,
    spread_moves=10,
    initial=None,
    threads=1,
    progress=None,
    target=None,
):
    """Estimate ln P(X) by thermodynamic integration over ``ladder``.

    One warm-up chain runs at tau = 1 in segments until a split-half rank-sum
    test stops flagging a trend (or the segment budget runs out, with a
    warning).  Every evidence chain then spreads briefly from the warm point
    and walks the full ladder.  Chains that fail outright are flagged in the
    warnings and reported as NaN in per_chain rather than aborting the rest.

    ``target`` substitutes a prebuilt posterior target for the (model, data)
    pair; worker processes rebuild from (model, data) unless one is given.
    """
    if not isinstance(config, ChainConfig):
        raise TypeError("config must be a ChainConfig")
    seed_root = (
        config.seed
        if isinstance(config.seed, np.random.SeedSequence)
        else np.random.SeedSequence(config.seed)
    )
    n_chains = ladder.chains
    seqs = seed_root.spawn(warmup_max_segments + n_chains)
    injected = target
    if target is None:
        target = PosteriorTarget(model, data)
    warnings: list = []
    q_warm = _warm_up(
        target,
        config,
        seqs[:warmup_max_segments],
        warmup_segment_moves,
        warmup_pvalue,
        warnings,
        initial,
    )
    jobs = [
        (model, data, ladder, config, q_warm, seqs[warmup_max_segments + z], rung_average, spread_moves, injected)
        for z in range(n_chains)
    ]
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_chain_job, jobs))
    else:
        outcomes = []
        for z, job in enumerate(jobs):
            outcomes.append(_chain_job(job))
            if progress is not None:
                progress(f"evidence chain {z + 1}/{n_chains} finished")
    per_chain = []
    rung_values = np.full((n_chains, ladder.size), np.nan)
    for z, (values, err) in enumerate(outcomes):
        if err is not None:
            warnings.append(f"chain {z} flagged: {err}")
            per_chain.append(math.nan)
            continue
        rung_values[z] = values
        per_chain.append(_trapezoid(values, ladder.taus))
    finite = [v for v in per_chain if math.isfinite(v)]
    if not finite:
        raise ChainError("all evidence chains failed")
    bme_mean = float(np.mean(finite))
    if len(finite) > 1:
        bme_stderr = float(np.std(finite, ddof=1) / math.sqrt(len(finite)))
    else:
        bme_stderr = math.nan
        warnings.append("single surviving chain; standard error undefined")
    with np.errstate(invalid="ignore"):
        rung_means = np.nanmean(rung_values, axis=0)
    return EvidenceEstimate(
        bme_mean=bme_mean,
        bme_stderr=bme_stderr,
        per_chain=per_chain,
        rung_means=[float(v) for v in rung_means],
        ladder=ladder,
        warnings=warnings,
        rung_values=rung_values,
    )


def laplace_full(model, data, *, initial=None, gtol=1e-6, max_iters=500, target=None):
    """Quadratic approximation of the evidence at the posterior mode.

    ln P(X) ~ -U(q*) + (d / 2) ln 2 pi - 0.5 ln |H(q*)|.  The determinant
    comes from the same Jacobi eigendecomposition the metric uses.  Raises
    if the optimizer stalls or the Hessian at the optimum is not positive
    definite.
    """
    if target is None:
        target = PosteriorTarget(model, data)
    x0 = target.initial_point() if initial is None else np.asarray(initial, dtype=float)

    def value_and_grad(x):
        try:
            state = target.at(x)
            return state.potential(), state.gradient()
        except (DomainError, DivergenceError):
            return math.inf, np.zeros(target.dim)

    result = lbfgs.minimize(value_and_grad, x0, gtol=gtol, max_iters=max_iters)
    if not result.converged:
        raise RuntimeError("Laplace mode search did not reach gradient tolerance")
    hessian = target.at(result.x).hessian()
    eigenvalues, _, _ = static_eigendecompose(hessian, LAPLACE_ZETA)
    if np.min(eigenvalues) <= 0.0:
        raise RuntimeError("Laplace invalid (singular/indefinite posterior)")
    logdet = float(np.sum(np.log(eigenvalues)))
    return -result.value + 0.5 * target.dim * LN_2PI - 0.5 * logdet


@dataclasses.dataclass(frozen=True)
class GridSpec:
    """Midpoint-rule grid over the two Gaussian-kernel hyperparameters."""

    c_max: float = 4.0
    c_mesh: float = 0.01
    sigma_max: float = 4.0
    sigma_mesh: float = 0.02
    pinned: tuple = ()  # ((name, value), ...) for hypers held fixed
    skip_tolerance: float = 0.01

    def centers(self):
        nc = int(round(self.c_max / self.c_mesh))
        ns = int(round(self.sigma_max / self.sigma_mesh))
        c = (np.arange(nc) + 0.5) * self.c_mesh
        s = (np.arange(ns) + 0.5) * self.sigma_mesh
        return c, s


def _inv_gamma_logpdf(theta, alpha, beta):
    return alpha * math.log(beta) - math.lgamma(alpha) - (alpha + 1.0) * math.log(theta) - beta / theta


def laplace_grid_oracle(model, data, grid_spec=None, *, gtol=1e-6, max_iters=200):
    """Grid-marginalised evidence over (c_g, sigma_g) with nested Laplace in a.

    Every grid node fixes the hyperparameters, optimises the coefficients
    (warm-started from the neighbouring node, serpentine order), and applies
    a Laplace approximation in the coefficient block.  Node evidences are
    combined by log-sum-exp with the hyperprior density and cell area.
    Nodes whose inner problem fails are skipped; more than ``skip_tolerance``
    of them is an error.
    """
    grid = GridSpec() if grid_spec is None else grid_spec
    pinned = dict(grid.pinned)
    target = PosteriorTarget(model, data)
    hyper_index = target.layout.hyper_index
    if "c_g" not in hyper_index or "sigma_g" not in hyper_index:
        raise ValueError("grid marginalisation needs Gaussian-kernel hyperparameters")
    unpinned_linear = [
        name for name in hyper_index if name not in ("c_g", "sigma_g", *pinned)
    ]
    if unpinned_linear:
        raise ValueError(
            f"hyperparameters {unpinned_linear} must be pinned for a 2-d grid"
        )
    transform = model.hyper_transform
    coef_idx = np.array(
        [i for i in range(target.dim) if i not in hyper_index.values()], dtype=int
    )
    base = np.zeros(target.dim)
    for name, value in pinned.items():
        if value <= 0.0:
            raise ValueError(f"pinned hyperparameter {name} must be positive")
        base[hyper_index[name]] = math.log(value) if transform == "log" else value

    c_pos = hyper_index["c_g"]
    s_pos = hyper_index["sigma_g"]
    prior_c = model.priors["c_g"]
    prior_s = model.priors["sigma_g"]
    c_centers, s_centers = grid.centers()
    log_area = math.log(grid.c_mesh) + math.log(grid.sigma_mesh)
    n_coef = coef_idx.size

    node_values = []
    skipped = 0
    total = 0
    a_warm = np.zeros(n_coef)
    for si, sigma in enumerate(s_centers):
        row = c_centers if si % 2 == 0 else c_centers[::-1]
        for c in row:
            total += 1
            q = base.copy()
            q[c_pos] = math.log(c) if transform == "log" else c
            q[s_pos] = math.log(sigma) if transform == "log" else sigma
            # optimise in prior-whitened coordinates: raw curvature spans
            # ~exp(sigma*w) across the grid, far beyond what a gradient
            # tolerance in the raw metric can certify in double precision
            scales = target.prior_scales(q)[coef_idx]

            def value_and_grad(avec):
                qq = q.copy()
                qq[coef_idx] = avec * scales
                try:
                    state = target.at(qq)
                    return state.potential(), state.gradient()[coef_idx] * scales
                except (DomainError, DivergenceError):
                    return math.inf, np.zeros(n_coef)

            result = lbfgs.minimize(
                value_and_grad, a_warm / scales, gtol=gtol, max_iters=max_iters
            )
            if not result.converged:
                skipped += 1
                continue
            a_warm = result.x * scales
            q[coef_idx] = a_warm
            state = target.at(q)
            conditional = state.potential() - target.hyperprior_potential(q)
            try:
                chol = np.linalg.cholesky(state.hessian()[np.ix_(coef_idx, coef_idx)])
            except np.linalg.LinAlgError:
                skipped += 1
                continue
            logdet = 2.0 * float(np.sum(np.log(np.diagonal(chol))))
            node_values.append(
                -conditional
                + 0.5 * n_coef * LN_2PI
                - 0.5 * logdet
                + _inv_gamma_logpdf(c, *prior_c)
                + _inv_gamma_logpdf(sigma, *prior_s)
                + log_area
            )
    if skipped > grid.skip_tolerance * total:
        raise RuntimeError(
            f"grid oracle skipped {skipped}/{total} nodes; result untrustworthy"
        )
    values = np.asarray(node_values)
    peak = float(np.max(values))
    return peak + math.log(float(np.sum(np.exp(values - peak))))
