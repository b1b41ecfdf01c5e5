"""Limited-memory BFGS with a strong Wolfe line search.

Small and dependency-free; the evidence module needs an inner optimizer for
Laplace approximations and grid marginalisation, where the objectives are
smooth and the dimension is modest.  Non-finite objective values are treated
as barrier violations: the line search backs off instead of propagating them.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np


@dataclasses.dataclass
class OptimResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool


def _two_loop(grad, s_hist, y_hist, rho_hist):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if y_hist:
        y_last = y_hist[-1]
        s_last = s_hist[-1]
        q *= float(s_last @ y_last) / float(y_last @ y_last)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def _zoom(fg, x, d, f0, dphi0, lo, f_lo, hi, c1, c2, max_iter=30):
    evals = 0
    for _ in range(max_iter):
        a = 0.5 * (lo + hi)
        f, g = fg(x + a * d)
        evals += 1
        dphi = float(g @ d) if math.isfinite(f) else math.inf
        if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
            hi = a
        else:
            if abs(dphi) <= -c2 * dphi0:
                return a, f, g, evals
            if dphi * (hi - lo) >= 0.0:
                hi = lo
            lo, f_lo = a, f
        if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo)):
            break
    # interval collapsed; accept lo if it at least gives sufficient decrease
    f, g = fg(x + lo * d)
    evals += 1
    if math.isfinite(f) and f <= f0 + c1 * lo * dphi0 and lo > 0.0:
        return lo, f, g, evals
    return None, f0, None, evals


def _wolfe_search(fg, x, f0, g0, d, c1, c2, max_expand=25):
    dphi0 = float(g0 @ d)
    a_prev, f_prev = 0.0, f0
    a = 1.0
    evals = 0
    for i in range(max_expand):
        f, g = fg(x + a * d)
        evals += 1
        if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or (i > 0 and f >= f_prev):
            res = _zoom(fg, x, d, f0, dphi0, a_prev, f_prev, a, c1, c2)
            return res[0], res[1], res[2], evals + res[3]
        dphi = float(g @ d)
        if abs(dphi) <= -c2 * dphi0:
            return a, f, g, evals
        if dphi >= 0.0:
            res = _zoom(fg, x, d, f0, dphi0, a, f, a_prev, c1, c2)
            return res[0], res[1], res[2], evals + res[3]
        a_prev, f_prev = a, f
        a *= 2.0
    return None, f0, None, evals


def minimize(
    value_and_grad,
    x0,
    *,
    memory=10,
    gtol=1e-6,
    max_iters=200,
    c1=1e-4,
    c2=0.9,
):
    """Minimise a smooth function given a (value, gradient) callable.

    Convergence is the sup-norm of the gradient dropping to ``gtol``.  A
    failed line search ends the run with converged=False unless the gradient
    test already passes.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_and_grad(x)
    evals = 1
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    s_hist: list = []
    y_hist: list = []
    rho_hist: list = []
    for it in range(max_iters):
        if float(np.max(np.abs(g))) <= gtol:
            return OptimResult(x, f, g, it, evals, True)
        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        if float(g @ d) >= 0.0:
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g
        alpha, f_new, g_new, n_ev = _wolfe_search(value_and_grad, x, f, g, d, c1, c2)
        evals += n_ev
        if alpha is None and s_hist:
            # near the optimum stale curvature pairs can poison the direction
            # badly enough to stall the line search; retry once from scratch
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            d = -g
            alpha, f_new, g_new, n_ev = _wolfe_search(value_and_grad, x, f, g, d, c1, c2)
            evals += n_ev
        if alpha is None:
            return OptimResult(x, f, g, it, evals, float(np.max(np.abs(g))) <= gtol)
        x_new = x + alpha * d
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
    return OptimResult(x, f, g, max_iters, evals, float(np.max(np.abs(g))) <= gtol)
