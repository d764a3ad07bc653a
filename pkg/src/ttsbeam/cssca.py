"""Long-term optimization of IRS phases and rate multipliers.

Each iteration draws a mini-batch of channel samples, solves the short-term
problem on every sample with the unrolled WMMSE network, and folds the
batch means of the power, the rate gaps and their gradients into
recursively averaged accumulators.  These define strongly convex proximal
surrogates; the resulting convex subproblem (or, when infeasible, the
minimax fallback) is solved exactly and the iterate moves toward its
solution by a vanishing step.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import qcqp, unfold
from .channel import ScsiModel, sample_batch

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi

# seed-domain tags; evaluation streams never collide with training streams
TRAIN_TAG = 1
EVAL_TAG = 2
INIT_TAG = 3
BASELINE_TAG = 4
BASELINE_EVAL_TAG = 5


def sample_seeds(master: int, tag: int, t: int, count: int):
    return [np.random.SeedSequence([master, tag, t, j]) for j in range(count)]


@dataclass(frozen=True)
class Schedule:
    """``scale / (offset + t)^exponent``, clipped into (0, 1]."""

    scale: float = 2.0
    offset: float = 2.0
    exponent: float = 1.0

    def __call__(self, t: int) -> float:
        return float(min(1.0, self.scale / (self.offset + t) ** self.exponent))


DEFAULT_RHO = Schedule(2.0, 2.0, 0.9)
DEFAULT_GAMMA = Schedule(2.0, 2.0, 1.0)


def step_sizes(t: int, rho: Schedule = DEFAULT_RHO, gamma: Schedule = DEFAULT_GAMMA):
    if t < 0:
        raise ValueError("iteration index must be non-negative")
    return rho(t), gamma(t)


@dataclass
class LongTermConfig:
    R: Sequence[float]
    B: int = 10
    J: int = 10
    T_iters: int = 200
    tau: float | Sequence[float] = 0.01
    rho: Schedule = DEFAULT_RHO
    gamma: Schedule = DEFAULT_GAMMA
    lam_cap: float = 1e6
    lam_init: float | Sequence[float] = 1.0
    theta_init: Sequence[float] | None = None
    seed: int = 0
    freeze_theta: bool = False
    phase_window: str = "box"  # "box": [0, 2pi]; "periodic": theta^t +- pi, wrapped

    def taus(self, K: int) -> np.ndarray:
        tau = np.broadcast_to(np.asarray(self.tau, dtype=float), (K + 1,)).copy()
        if np.any(tau <= 0):
            raise ValueError("tau must be positive")
        return tau


@dataclass
class LongTermState:
    theta: np.ndarray
    lam: np.ndarray
    f: np.ndarray  # (K+1,)
    g_theta: np.ndarray  # (K+1, N); row 0 stays zero
    g_w: np.ndarray  # (K+1, N)
    g_lambda: np.ndarray  # (K+1, K)
    t: int = 0
    rho: float = 1.0
    gamma: float = 1.0

    @classmethod
    def initial(cls, theta, lam):
        theta = np.asarray(theta, dtype=float)
        lam = np.asarray(lam, dtype=float)
        N, K = theta.size, lam.size
        return cls(theta.copy(), lam.copy(), np.zeros(K + 1), np.zeros((K + 1, N)),
                   np.zeros((K + 1, N)), np.zeros((K + 1, K)))


@dataclass
class SurrogateSet:
    functions: list  # ProxQuadratic per k in {0} u users

    @property
    def objective(self):
        return self.functions[0]

    @property
    def constraints(self):
        return self.functions[1:]


def _mix(old, new, rho):
    return (1.0 - rho) * old + rho * new


def batch_estimates(theta, lam, batch, J, R):
    """Batch means of power, rate gaps and their gradients at ``(theta, lam)``."""
    sol, tape = unfold.record_and_solve(theta, lam, batch, J, R)
    through, direct = unfold.vjp_all(tape)
    sign = np.ones(len(lam) + 1)
    sign[1:] = -1.0  # constraints are R_k - r_k
    f = np.concatenate([[sol.power.mean()], np.mean(np.asarray(R) - sol.rates, axis=0)])
    g_theta = sign[:, None] * direct.mean(axis=1)
    g_w = sign[:, None] * through.d_theta.mean(axis=1)
    g_lambda = sign[:, None] * through.d_lambda.mean(axis=1)
    return f, g_theta, g_w, g_lambda, sol


def update_surrogates(state: LongTermState, batch, J, R, taus, rho=None):
    """Fold one mini-batch into the accumulators and build the surrogates at the current point."""
    rho = state.rho if rho is None else rho
    f, g_theta, g_w, g_lambda, sol = batch_estimates(state.theta, state.lam, batch, J, R)
    new = replace(
        state,
        f=_mix(state.f, f, rho),
        g_theta=_mix(state.g_theta, g_theta, rho),
        g_w=_mix(state.g_w, g_w, rho),
        g_lambda=_mix(state.g_lambda, g_lambda, rho),
        rho=rho,
    )
    return new, build_surrogates(new, taus), sol


def build_surrogates(state: LongTermState, taus) -> SurrogateSet:
    funcs = [
        qcqp.ProxQuadratic.from_blocks(state.f[k], state.g_theta[k] + state.g_w[k], state.g_lambda[k],
                                       taus[k], state.theta, state.lam)
        for k in range(len(state.f))
    ]
    return SurrogateSet(funcs)


def subproblem_box(state: LongTermState, lam_cap: float, freeze_theta: bool = False,
                   phase_window: str = "box"):
    box = qcqp.BoxDomain.phases_and_multipliers(state.theta.size, state.lam.size, lam_cap)
    N = state.theta.size
    if phase_window == "periodic":
        box.lower[:N] = state.theta - np.pi
        box.upper[:N] = state.theta + np.pi
    elif phase_window != "box":
        raise ValueError(f"unknown phase window {phase_window!r}")
    if freeze_theta:
        N = state.theta.size
        box.lower[:N] = state.theta
        box.upper[:N] = state.theta
    return box


def solve_feasible_subproblem(surrogates: SurrogateSet, box) -> qcqp.QcqpResult:
    return qcqp.solve_constrained(surrogates.objective, surrogates.constraints, box)


def solve_fallback_subproblem(surrogates: SurrogateSet, box) -> qcqp.QcqpResult:
    return qcqp.solve_minimax(surrogates.constraints, box)


def smooth_update(state: LongTermState, theta_bar, lam_bar, gamma) -> LongTermState:
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    theta = (1.0 - gamma) * state.theta + gamma * np.asarray(theta_bar)
    theta = np.mod(theta, TWO_PI)
    lam = np.maximum((1.0 - gamma) * state.lam + gamma * np.asarray(lam_bar), 0.0)
    return replace(state, theta=theta, lam=lam, gamma=gamma)


@dataclass
class TraceRow:
    t: int
    f: np.ndarray
    branch: str
    gamma: float
    rho: float
    wall_ms: float


@dataclass
class LongTermResult:
    theta: np.ndarray
    lam: np.ndarray
    trace: list
    state: LongTermState
    cap_active: bool = False
    diagnostics: list = field(default_factory=list)

    def write_trace(self, path, timing: bool = False):
        K = len(self.lam)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "f_0", *[f"f_{k + 1}" for k in range(K)], "branch", "gamma", "rho", "wall_ms"])
            for row in self.trace:
                wr.writerow([row.t, *[repr(float(v)) for v in row.f], row.branch, repr(row.gamma),
                             repr(row.rho), f"{row.wall_ms:.3f}" if timing else ""])

    def to_json(self) -> str:
        return json.dumps({"theta": self.theta.tolist(), "lambda": self.lam.tolist(),
                           "cap_active": self.cap_active, "iterations": len(self.trace)}, indent=2)


def initial_point(scsi: ScsiModel, cfg: LongTermConfig):
    K, N = scsi.dims.K, scsi.dims.N
    if cfg.theta_init is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, INIT_TAG]))
        theta = rng.uniform(0.0, TWO_PI, N)
    else:
        theta = np.asarray(cfg.theta_init, dtype=float)
    lam = np.broadcast_to(np.asarray(cfg.lam_init, dtype=float), (K,)).copy()
    return theta, lam


def optimize_long_term(scsi: ScsiModel, cfg: LongTermConfig, callback=None) -> LongTermResult:
    """Run the stochastic surrogate loop for ``cfg.T_iters`` iterations."""
    K = scsi.dims.K
    R = np.broadcast_to(np.asarray(cfg.R, dtype=float), (K,))
    taus = cfg.taus(K)
    theta, lam = initial_point(scsi, cfg)
    state = LongTermState.initial(theta, lam)
    trace, diagnostics = [], []
    for t in range(cfg.T_iters):
        t0 = time.perf_counter()
        rho, gamma = step_sizes(t, cfg.rho, cfg.gamma)
        batch = sample_batch(scsi, sample_seeds(cfg.seed, TRAIN_TAG, t, cfg.B))
        state, surr, _ = update_surrogates(replace(state, t=t), batch, cfg.J, R, taus, rho)
        box = subproblem_box(state, cfg.lam_cap, cfg.freeze_theta, cfg.phase_window)
        res = solve_feasible_subproblem(surr, box)
        branch = "feasible"
        if not res.feasible or not res.converged:
            if res.feasible and not res.converged:
                diagnostics.append((t, res.diagnostic))
            res = solve_fallback_subproblem(surr, box)
            branch = "fallback"
        N = state.theta.size
        state = smooth_update(state, res.x[:N], res.x[N:], gamma)
        trace.append(TraceRow(t, state.f.copy(), branch, gamma, rho, 1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(state, trace[-1])
    cap_active = bool(np.any(state.lam >= cfg.lam_cap * (1 - 1e-9)))
    if cap_active:
        log.warning("multiplier cap %.3g is active at the final iterate", cfg.lam_cap)
    return LongTermResult(state.theta, state.lam, trace, replace(state, t=cfg.T_iters), cap_active, diagnostics)
