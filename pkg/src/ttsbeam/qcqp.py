"""Exact solver for box-constrained problems built from proximal quadratics.

Every function has the form ``c + g.(x - x0) + tau ||x - x0||^2``.  Any
nonnegative combination of such functions is again of that form, so the
box-constrained minimizer of a Lagrangian is the coordinate-wise clipped
unconstrained minimizer.  Both subproblems are therefore solved through
their low-dimensional concave duals:

* ``solve_constrained``: min f0 s.t. f_k <= 0, dual over ``mu >= 0``;
* ``solve_minimax``: min max_k f_k, dual over the unit simplex.

The duals are maximized with an active-set Newton method on the current
face; the dual Hessian is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq


@dataclass
class ProxQuadratic:
    constant: float
    lin: np.ndarray
    tau: float
    center: np.ndarray

    def __post_init__(self):
        self.lin = np.asarray(self.lin, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lin.shape != self.center.shape:
            raise ValueError("linear term and center must have the same shape")

    @classmethod
    def from_blocks(cls, constant, lin_theta, lin_lambda, tau, theta_c, lambda_c):
        return cls(constant, np.concatenate([lin_theta, lin_lambda]), tau,
                   np.concatenate([theta_c, lambda_c]))

    def __call__(self, x):
        d = np.asarray(x) - self.center
        return self.constant + d @ self.lin + self.tau * np.sum(d * d, axis=-1)

    def grad(self, x):
        return self.lin + 2.0 * self.tau * (np.asarray(x) - self.center)


@dataclass
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @classmethod
    def phases_and_multipliers(cls, N, K, lam_cap=1e6):
        lo = np.zeros(N + K)
        hi = np.concatenate([np.full(N, 2 * np.pi), np.full(K, lam_cap)])
        return cls(lo, hi)

    def clip(self, x):
        return np.clip(x, self.lower, self.upper)


@dataclass
class QcqpResult:
    x: np.ndarray
    value: float
    multipliers: np.ndarray
    feasible: bool = True
    converged: bool = True
    iterations: int = 0
    diagnostic: str = ""
    kkt: dict = field(default_factory=dict)


def inner_argmin(weights, functions, box: BoxDomain):
    """Minimizer over ``box`` of ``sum_i weights[i] * functions[i]``."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.any(weights > 0):
        raise ValueError("weights must be nonnegative with at least one positive entry")
    curv = 0.0
    num = np.zeros_like(functions[0].center)
    for wi, f in zip(weights, functions):
        if wi == 0:
            continue
        curv += wi * f.tau
        num += wi * (2.0 * f.tau * f.center - f.lin)
    return box.clip(num / (2.0 * curv))


class _Dual:
    """Value, gradient and Hessian of ``min_x sum_i w_i f_i(x)`` as a function of the weights."""

    def __init__(self, functions, box, base_weight):
        self.funcs = functions
        self.box = box
        self.base = base_weight  # weight of functions[0] (the objective), 0 for minimax

    def weights(self, y):
        return np.concatenate([[self.base], y]) if self.base else np.asarray(y)

    def evaluate(self, y):
        w = self.weights(y)
        x = inner_argmin(w, self.funcs, self.box)
        vals = np.array([f(x) for f in self.funcs])
        grads = np.array([f.grad(x) for f in self.funcs])
        value = float(w @ vals)
        cons = slice(1, None) if self.base else slice(None)
        g = vals[cons]
        curv = 2.0 * sum(wi * f.tau for wi, f in zip(w, self.funcs))
        free = (x > self.box.lower) & (x < self.box.upper)
        Gf = grads[cons][:, free]
        H = -(Gf @ Gf.T) / curv
        return value, g, H, x


def _feasible_point(y, simplex):
    y = np.maximum(y, 0.0)
    if simplex:
        y = y / y.sum()
    return y


def _exact_step(dual, y, d, alpha_max, simplex):
    """Maximize the concave dual along ``y + alpha d``, ``0 <= alpha <= alpha_max``.

    The directional derivative is continuous and non-increasing, so its root
    is bracketed and found by Brent's method.  ``d`` is normalized first so the
    bracket tolerance is meaningful when the Newton step is badly scaled
    (flat dual faces make ``d`` huge).
    """
    norm = np.abs(d).max()
    if norm == 0:
        return 0.0
    d = d / norm
    alpha = _exact_step_unit(dual, y, d, alpha_max * norm, simplex) / norm
    # callers test ``alpha == alpha_max``; undo rounding from the rescaling
    return alpha_max if alpha >= alpha_max * (1 - 8 * np.finfo(float).eps) else alpha


def _exact_step_unit(dual, y, d, alpha_max, simplex):
    def deriv(alpha):
        return float(dual.evaluate(_feasible_point(y + alpha * d, simplex))[1] @ d)

    hi = 1.0 + np.abs(y).max(initial=0.0) if not np.isfinite(alpha_max) else alpha_max
    d_hi = deriv(hi)
    while d_hi > 0 and not np.isfinite(alpha_max) and hi < 1e30:
        hi *= 4.0
        d_hi = deriv(hi)
    if d_hi >= 0:
        return hi
    if deriv(0.0) <= 0:
        return 0.0
    return brentq(deriv, 0.0, hi, xtol=1e-15 * max(1.0, hi), rtol=4 * np.finfo(float).eps)


def _gap(y, g, simplex):
    """Primal-dual gap certificate; the inner minimizer is exact for every ``y``."""
    if simplex:
        return float(g.max() - y @ g)
    return float(np.abs(y @ g) + np.max(g, initial=0.0).clip(min=0.0))


def _maximize_dual(dual: _Dual, y0, simplex: bool, tol=1e-13, max_iter=500, gap_tol=1e-10,
                   stall_gap_tol=1e-9, patience=50):
    """Active-set Newton ascent over the nonnegative orthant or the unit simplex.

    Stops when the face is optimal or when the primal-dual gap certificate
    falls below ``gap_tol`` relative to the problem scale.  Near a kink of
    the dual (an inner coordinate exactly on its bound) the face Hessian is
    singular and Newton steps can zigzag; if the best gap then stops
    improving for ``patience`` iterations while below ``stall_gap_tol``, the
    best iterate is returned as converged.
    """
    y = np.array(y0, dtype=float)
    K = len(y)
    active = y > 0
    val, g, H, x = dual.evaluate(y)
    scale = 1.0 + abs(val) + np.abs(g).max(initial=0.0)
    it = 0
    stalled = False
    best = (np.inf, None)
    since_best = 0
    for it in range(1, max_iter + 1):
        # gap is measured against the current iterate, not the starting point
        gap = _gap(y, g, simplex) / (1.0 + abs(val) + np.abs(g).max(initial=0.0))
        if gap <= gap_tol:
            break
        if gap < 0.999 * best[0]:
            best, since_best = (gap, (y.copy(), val, g, x)), 0
        else:
            since_best += 1
            if since_best >= patience and best[0] <= stall_gap_tol:
                return (*best[1], it, True)
        S = np.flatnonzero(active)
        level = g[S].mean() if (simplex and len(S)) else 0.0
        red = g[S] - level if len(S) else np.zeros(0)
        if len(S) == 0 or stalled or np.abs(red).max() <= tol * scale:
            stalled = False
            # face is optimal; add the most attractive inactive coordinate if any
            outside = np.flatnonzero(~active)
            if outside.size == 0:
                break
            thresh = level if simplex and len(S) else 0.0
            k = outside[np.argmax(g[outside])]
            if g[k] - thresh <= tol * scale:
                break
            active[k] = True
            if simplex and len(S) == 0:
                y[:] = 0.0
                y[k] = 1.0
                val, g, H, x = dual.evaluate(y)
            continue

        Hs = -H[np.ix_(S, S)]
        reg = 1e-12 * (1.0 + np.abs(Hs).max())
        Hs = Hs + reg * np.eye(len(S))
        if simplex:
            kkt = np.zeros((len(S) + 1, len(S) + 1))
            kkt[:-1, :-1] = Hs
            kkt[:-1, -1] = 1.0
            kkt[-1, :-1] = 1.0
            rhs = np.concatenate([g[S], [0.0]])
            d_S = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:-1]
        else:
            d_S = np.linalg.solve(Hs, g[S])
        d = np.zeros(K)
        d[S] = d_S
        slope = g @ d
        if slope <= 0:
            d = np.zeros(K)
            d[S] = red
            slope = g @ d
        # largest step keeping the active coordinates nonnegative
        neg = d < 0
        ratios = np.where(neg, -y / np.where(neg, d, -1.0), np.inf)
        alpha_max = ratios.min()
        alpha = _exact_step(dual, y, d, alpha_max, simplex)
        y_new = _feasible_point(y + alpha * d, simplex)
        v_new, g_new, H_new, x_new = dual.evaluate(y_new)
        if np.linalg.norm(y_new - y) <= 1e-15 * (1.0 + np.linalg.norm(y)):
            # no ascent along d: the face is optimal up to rounding
            if np.abs(red).max() > 1e-7 * scale:
                return y, val, g, x, it, False
            stalled = True
            continue
        hit = alpha == alpha_max
        y, val, g, H, x = y_new, v_new, g_new, H_new, x_new
        if hit:
            blocking = np.flatnonzero(ratios <= alpha_max)
            y[blocking] = 0.0
            active[blocking] = False
            if simplex:
                y /= y.sum()
            val, g, H, x = dual.evaluate(y)
        if not simplex and np.any(y > 1e15):
            return y, val, g, x, it, False
    else:
        return y, val, g, x, it, False
    return y, val, g, x, it, True


def kkt_residuals(x, mu, objective, constraints, box):
    """KKT residuals of ``min objective s.t. constraints <= 0`` at ``(x, mu)``."""
    gl = objective.grad(x) + sum(m * c.grad(x) for m, c in zip(mu, constraints))
    at_lo = x <= box.lower
    at_hi = x >= box.upper
    pg = np.where(at_lo & (gl > 0), 0.0, np.where(at_hi & (gl < 0), 0.0, gl))
    pg = np.where(box.lower == box.upper, 0.0, pg)
    f = np.array([c(x) for c in constraints])
    return {
        "stationarity": float(np.linalg.norm(pg)),
        "primal": float(np.max(f, initial=0.0).clip(min=0.0)),
        "dual": float(-np.min(mu, initial=0.0).clip(max=0.0)),
        "complementarity": float(np.max(np.abs(mu * f), initial=0.0)),
    }


def solve_minimax(constraints, box: BoxDomain, *, tol=1e-13, max_iter=500) -> QcqpResult:
    """Minimize ``max_k f_k`` over ``box``."""
    if not constraints:
        raise ValueError("need at least one function")
    K = len(constraints)
    dual = _Dual(list(constraints), box, base_weight=0.0)
    nu, val, g, x, it, ok = _maximize_dual(dual, np.full(K, 1.0 / K), True, tol, max_iter)
    f = np.array([c(x) for c in constraints])
    value = float(f.max())
    gl = sum(n * c.grad(x) for n, c in zip(nu, constraints))
    at_lo, at_hi = x <= box.lower, x >= box.upper
    pg = np.where(at_lo & (gl > 0), 0.0, np.where(at_hi & (gl < 0), 0.0, gl))
    pg = np.where(box.lower == box.upper, 0.0, pg)
    kkt = {
        "stationarity": float(np.linalg.norm(pg)),
        "complementarity": float(np.max(nu * (value - f))),
        "duality_gap": float(value - val),
    }
    return QcqpResult(x=x, value=value, multipliers=nu, converged=ok, iterations=it,
                      diagnostic="" if ok else "minimax dual did not converge", kkt=kkt)


def solve_constrained(objective, constraints, box: BoxDomain, *, feas_tol=1e-9, tol=1e-13,
                      max_iter=500) -> QcqpResult:
    """Minimize ``objective`` subject to ``f_k <= 0`` over ``box``.

    Returns a result with ``feasible=False`` (and the minimax point as ``x``)
    when no box point satisfies all constraints.
    """
    constraints = list(constraints)
    if not constraints:
        x = inner_argmin([1.0], [objective], box)
        return QcqpResult(x=x, value=float(objective(x)), multipliers=np.zeros(0))
    mm = solve_minimax(constraints, box, tol=tol, max_iter=max_iter)
    if mm.value > feas_tol:
        return QcqpResult(x=mm.x, value=float(objective(mm.x)), multipliers=np.zeros(len(constraints)),
                          feasible=False, converged=mm.converged, iterations=mm.iterations,
                          diagnostic=f"infeasible: min max_k f_k = {mm.value:.3e}")
    dual = _Dual([objective, *constraints], box, base_weight=1.0)
    mu, val, g, x, it, ok = _maximize_dual(dual, np.zeros(len(constraints)), False, tol, max_iter)
    kkt = kkt_residuals(x, mu, objective, constraints, box)
    return QcqpResult(x=x, value=float(objective(x)), multipliers=mu, converged=ok, iterations=it,
                      diagnostic="" if ok else "dual iteration limit or unbounded multipliers",
                      kkt=kkt)


def dual_function(mu, objective, constraints, box):
    """Lagrange dual ``min_x f0 + sum mu_k f_k`` (used to check concavity)."""
    return _Dual([objective, *constraints], box, base_weight=1.0).evaluate(np.asarray(mu, float))[0]
