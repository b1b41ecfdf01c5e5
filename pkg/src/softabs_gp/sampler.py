"""Riemannian-manifold HMC on the softabs metric, with a Euclidean baseline.

The sampler talks to targets through a small protocol: ``target.dim``,
``target.initial_point()`` and ``target.at(q)`` returning a state with
``q``, ``potential()``, ``gradient()``, ``hessian()`` and
``trace_single(w)``.  Posterior targets implement it, and so can simple
analytic test densities.

The generalized leapfrog keeps the update reversible on a position-dependent
metric by solving two fixed points per step: the momentum half-step (the
trace term depends on the new momentum) and the position step (the midpoint
velocity depends on the new position's metric).  Either solve failing to
settle within the iteration budget, or any non-finite quantity, marks the
move divergent; divergent moves are rejected and the metric is rebuilt cold.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np

from .metric import (
    JacobiError,
    dynamic_eigendecompose,
    metric_apply_inverse,
    metric_from_hessian,
    metric_quadratic,
    sample_momentum,
    w1_matrix,
    w2_matrix,
)
from .posterior import DivergenceError, DomainError, PosteriorTarget

LN_2PI = math.log(2.0 * math.pi)

METRIC_MODES = ("softabs-dynamic", "softabs-static", "euclidean")

_DIVERGENT = (DivergenceError, DomainError, JacobiError, FloatingPointError)


class ChainError(RuntimeError):
    """A chain could not start or diverged before producing any move."""


@dataclasses.dataclass(frozen=True)
class ChainConfig:
    """Tuning knobs for one chain; defaults follow the reference settings."""

    epsilon: float = 0.001
    leapfrogs: int = 100
    moves: int = 9600
    burnin: int = 2400
    kappa: float = 1.0
    zeta: float = 1e-13
    fp_max_iters: int = 6
    fp_tol: float = 1e-10
    gs_interval: int = 10
    sweep_cap: int = 30
    metric: str = "softabs-dynamic"
    seed: int = 0
    record_q: bool = False

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.leapfrogs < 1:
            raise ValueError("leapfrogs must be at least 1")
        if self.moves < 1:
            raise ValueError("moves must be at least 1")
        if not 0 <= self.burnin <= self.moves:
            raise ValueError("burnin must lie in [0, moves]")
        if self.kappa <= 0.0 or self.zeta <= 0.0:
            raise ValueError("kappa and zeta must be positive")
        if self.fp_max_iters < 1:
            raise ValueError("fp_max_iters must be at least 1")
        if self.fp_tol <= 0.0:
            raise ValueError("fp_tol must be positive")
        if self.metric not in METRIC_MODES:
            raise ValueError(f"metric must be one of {METRIC_MODES}")


@dataclasses.dataclass
class ChainRecord:
    """One move's bookkeeping; ``uniform`` is kept in memory, not serialized."""

    move: int
    logpost: float
    h_before: float
    h_after: float | None
    accept: bool
    divergent: bool
    sweeps_mean: float
    wall_ms: float
    q: np.ndarray | None = None
    uniform: float | None = None


def record_to_dict(record):
    out = {
        "move": int(record.move),
        "logpost": float(record.logpost),
        "h_before": float(record.h_before),
        "h_after": None if record.h_after is None else float(record.h_after),
        "accept": bool(record.accept),
        "divergent": bool(record.divergent),
        "sweeps_mean": float(record.sweeps_mean),
        "wall_ms": float(record.wall_ms),
    }
    if record.q is not None:
        out["q"] = [float(v) for v in record.q]
    return out


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)))
            fh.write("\n")


def read_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            try:
                records.append(
                    ChainRecord(
                        move=int(raw["move"]),
                        logpost=float(raw["logpost"]),
                        h_before=float(raw["h_before"]),
                        h_after=None if raw["h_after"] is None else float(raw["h_after"]),
                        accept=bool(raw["accept"]),
                        divergent=bool(raw["divergent"]),
                        sweeps_mean=float(raw["sweeps_mean"]),
                        wall_ms=float(raw["wall_ms"]),
                        q=np.asarray(raw["q"], dtype=float) if "q" in raw else None,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records


@dataclasses.dataclass
class _Frame:
    """Sampler position bundle: posterior state, metric, and cached W2."""

    state: object
    metric: object  # None in euclidean mode
    w2: np.ndarray | None


def _frame_hamiltonian(frame, p):
    if frame.metric is None:
        kinetic = 0.5 * float(p @ p) + 0.5 * p.shape[0] * LN_2PI
    else:
        kinetic = 0.5 * metric_quadratic(frame.metric, p)
        kinetic += 0.5 * (frame.metric.dim * LN_2PI + frame.metric.logdet)
    return frame.state.potential() + kinetic


def hamiltonian(q, p, metric, target):
    """H(q, p) = U(q) + 0.5 ln((2 pi)^d |G|) + 0.5 p^T G^-1 p.

    ``metric=None`` selects the Euclidean special case G = I.
    """
    state = target.at(np.asarray(q, dtype=float))
    return _frame_hamiltonian(_Frame(state, metric, None), np.asarray(p, dtype=float))


def grad_q_hamiltonian(q, p, metric, target, cache=None):
    """Position gradient of H including both curvature trace terms.

    ``cache`` may carry precomputed contraction matrices for this exact
    (metric, p) pair; callers that reuse w2 across momentum iterations
    pass one to skip its reassembly.
    """
    state = target.at(np.asarray(q, dtype=float))
    if metric is None:
        return state.gradient()
    if cache is not None:
        return state.gradient() + 0.5 * state.trace_single(cache.w2 - cache.w1)
    w1 = w1_matrix(metric, np.asarray(p, dtype=float))
    return state.gradient() + 0.5 * state.trace_single(w2_matrix(metric) - w1)


def _updated_metric(hessian, previous, config):
    if config.metric == "softabs-static":
        return metric_from_hessian(hessian, config.kappa, config.zeta, config.sweep_cap)
    return dynamic_eigendecompose(
        hessian,
        previous,
        config.zeta,
        sweep_cap=config.sweep_cap,
        gs_interval=config.gs_interval,
    )


def _leapfrog_riemann(frame, p, config, target, diag):
    eps = config.epsilon
    state = frame.state
    metric = frame.metric
    w2 = frame.w2
    grad = state.gradient()

    def grad_h(p_vec):
        # combined 0.5 tr((W2 - W1) dH) pass; W2 is fixed while p iterates
        w1 = w1_matrix(metric, p_vec)
        return grad + 0.5 * state.trace_single(w2 - w1)

    p_half = p - 0.5 * eps * grad_h(p)
    converged = False
    for it in range(config.fp_max_iters):
        p_next = p - 0.5 * eps * grad_h(p_half)
        delta = float(np.max(np.abs(p_next - p_half)))
        p_half = p_next
        if delta <= config.fp_tol:
            converged = True
            diag["fp_p_iters"].append(it + 1)
            break
    if not converged:
        raise DivergenceError("momentum half-step fixed point stalled")

    q0 = state.q
    v0 = metric_apply_inverse(metric, p_half)
    q_cur = q0 + eps * v0
    metric_cur = metric
    state_cur = None
    converged = False
    for it in range(config.fp_max_iters):
        state_cur = target.at(q_cur)
        metric_cur = _updated_metric(state_cur.hessian(), metric_cur, config)
        diag["sweeps"].append(metric_cur.sweep_count)
        q_next = q0 + 0.5 * eps * (v0 + metric_apply_inverse(metric_cur, p_half))
        if float(np.max(np.abs(q_next - q_cur))) <= config.fp_tol:
            # keep q_cur: its state and metric are already exact for it
            converged = True
            diag["fp_q_iters"].append(it + 1)
            break
        q_cur = q_next
    if not converged:
        raise DivergenceError("position step fixed point stalled")

    w2_new = w2_matrix(metric_cur)
    w1 = w1_matrix(metric_cur, p_half)
    correction = 0.5 * state_cur.trace_single(w2_new - w1)
    p_new = p_half - 0.5 * eps * (state_cur.gradient() + correction)
    return _Frame(state_cur, metric_cur, w2_new), p_new


def _leapfrog_euclid(frame, p, config, target):
    eps = config.epsilon
    p_half = p - 0.5 * eps * frame.state.gradient()
    q_new = frame.state.q + eps * p_half
    state_new = target.at(q_new)
    p_new = p_half - 0.5 * eps * state_new.gradient()
    return _Frame(state_new, None, None), p_new


def _new_diag():
    return {"sweeps": [], "fp_p_iters": [], "fp_q_iters": []}


def _leapfrog(frame, p, config, target, diag):
    if frame.metric is None:
        return _leapfrog_euclid(frame, p, config, target)
    return _leapfrog_riemann(frame, p, config, target, diag)


def leapfrog_step(q, p, metric, target, config):
    """One generalized leapfrog step from (q, p).

    Returns (q_new, p_new, metric_new, diagnostics) where diagnostics carries
    the per-decomposition sweep counts and the fixed-point iteration counts
    of both implicit substeps.  ``metric=None`` integrates with the identity
    metric.
    """
    state = target.at(np.asarray(q, dtype=float))
    frame = _Frame(state, metric, w2_matrix(metric) if metric is not None else None)
    diag = _new_diag()
    new_frame, p_new = _leapfrog(frame, np.asarray(p, dtype=float), config, target, diag)
    return new_frame.state.q, p_new, new_frame.metric, diag


@dataclasses.dataclass
class ChainResult:
    records: list
    q_final: np.ndarray
    accept_count: int
    divergence_count: int
    config: ChainConfig

    @property
    def acceptance_rate(self):
        return self.accept_count / max(1, len(self.records))

    @property
    def logpost(self):
        return np.array([r.logpost for r in self.records])

    def kept_logpost(self):
        return self.logpost[self.config.burnin :]

    def sample_matrix(self):
        """Stacked recorded positions; requires record_q."""
        rows = [r.q for r in self.records if r.q is not None]
        if not rows:
            raise ValueError("chain was run without record_q")
        return np.vstack(rows)


def _initial_frame(target, q0, config):
    state = target.at(q0)
    state.gradient()
    if config.metric == "euclidean":
        return _Frame(state, None, None)
    metric = metric_from_hessian(state.hessian(), config.kappa, config.zeta, config.sweep_cap)
    return _Frame(state, metric, w2_matrix(metric))


def run_chain(target, config, *, initial=None):
    """Run one MCMC chain and return its records and final position.

    The RNG stream is fixed by config.seed: momentum draws then one MH
    uniform per move, so identical seeds give identical records apart from
    wall-clock timings.  A divergence on the very first move raises
    ChainError; later divergences are counted and rejected.
    """
    rng = np.random.default_rng(config.seed)
    if initial is None:
        q0 = np.asarray(target.initial_point(), dtype=float).copy()
    else:
        q0 = np.asarray(initial, dtype=float).copy()
    if q0.shape != (target.dim,):
        raise ValueError("initial point has wrong dimension")
    try:
        frame = _initial_frame(target, q0, config)
    except _DIVERGENT as exc:
        raise ChainError(f"chain start failed: {exc}") from exc

    euclid = config.metric == "euclidean"
    records = []
    accepts = 0
    divergences = 0
    for move in range(config.moves):
        t0 = time.perf_counter()
        if euclid:
            p = rng.standard_normal(target.dim)
        else:
            p = sample_momentum(frame.metric, rng)
        h_before = _frame_hamiltonian(frame, p)
        diag = _new_diag()
        sweeps = diag["sweeps"]
        divergent = False
        h_after = None
        new_frame = frame
        p_cur = p
        try:
            for _ in range(config.leapfrogs):
                new_frame, p_cur = _leapfrog(new_frame, p_cur, config, target, diag)
            h_after = _frame_hamiltonian(new_frame, p_cur)
            if not math.isfinite(h_after):
                raise DivergenceError("non-finite Hamiltonian after trajectory")
        except _DIVERGENT:
            divergent = True
            h_after = None
        uniform = rng.uniform()
        if divergent:
            accept = False
        else:
            accept = (h_before - h_after) > math.log(uniform)
        if accept:
            frame = new_frame
            accepts += 1
        else:
            if divergent:
                divergences += 1
                if move == 0:
                    raise ChainError(
                        "divergence on the first move; initial point or epsilon unusable"
                    )
            if not euclid:
                # cold resync so a rejected trajectory cannot pollute the basis
                metric = metric_from_hessian(
                    frame.state.hessian(), config.kappa, config.zeta, config.sweep_cap
                )
                frame = _Frame(frame.state, metric, w2_matrix(metric))
        records.append(
            ChainRecord(
                move=move,
                logpost=-frame.state.potential(),
                h_before=h_before,
                h_after=h_after,
                accept=accept,
                divergent=divergent,
                sweeps_mean=float(np.mean(sweeps)) if sweeps else 0.0,
                wall_ms=(time.perf_counter() - t0) * 1e3,
                q=frame.state.q.copy() if config.record_q else None,
                uniform=uniform,
            )
        )
    return ChainResult(
        records=records,
        q_final=frame.state.q.copy(),
        accept_count=accepts,
        divergence_count=divergences,
        config=config,
    )


def rmhmc_run(model, data, config, *, initial=None):
    """Sample the hierarchical posterior with the configured metric."""
    return run_chain(PosteriorTarget(model, data), config, initial=initial)


def euclidean_hmc_run(model, data, config, *, initial=None):
    """Identity-metric baseline; same records, no eigendecompositions."""
    config = dataclasses.replace(config, metric="euclidean")
    return run_chain(PosteriorTarget(model, data), config, initial=initial)


def _pooled_ranks(values):
    v = np.asarray(values, dtype=float)
    n = v.shape[0]
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(n)
    tie_sizes = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        tie_sizes.append(j - i + 1)
        i = j + 1
    return ranks, tie_sizes


def rank_sum_test(x, y):
    """Two-sided Wilcoxon rank-sum via the tie-corrected normal approximation.

    Returns (z, p).  Fully tied pooled samples have zero variance and report
    p = 1.  A continuity correction of 0.5 pulls the statistic toward the
    null before standardising.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or y.ndim != 1 or x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("rank_sum_test needs two non-empty 1-d samples")
    n1 = x.shape[0]
    n2 = y.shape[0]
    n = n1 + n2
    ranks, tie_sizes = _pooled_ranks(np.concatenate([x, y]))
    w = float(np.sum(ranks[:n1]))
    mean = n1 * (n + 1) / 2.0
    tie_term = float(sum(t**3 - t for t in tie_sizes))
    variance = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0.0:
        return 0.0, 1.0
    diff = w - mean
    if abs(diff) <= 0.5:
        z = 0.0
    else:
        z = (diff - math.copysign(0.5, diff)) / math.sqrt(variance)
    return float(z), float(math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_split_half(values):
    """Rank-sum test of the first half of a series against the second.

    A flat trend (large p) is the stationarity signal used by warm-up gating.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.shape[0] < 10:
        raise ValueError("split-half test needs at least 10 values")
    half = v.shape[0] // 2
    return rank_sum_test(v[:half], v[half:])
