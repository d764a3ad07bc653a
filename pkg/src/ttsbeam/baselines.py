"""Benchmark schemes, each paired with per-slot minimum-power beamforming.

* ``random-phase``: fresh uniform phases every slot.
* ``TTS-WSRMax``: long-term phases trained to maximize the expected sum
  rate of an equal-power matched filter, then fixed.
* ``AO-simplified``: instantaneous-CSI alternating optimization between
  minimum-power beamforming and per-element phase updates.

Per-slot beamformers meet SINR targets ``2^R - 1`` at minimum power.  The
problem is solved by the uplink-downlink duality fixed point rather than a
conic solver.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import qcqp
from .channel import (
    ChannelSample,
    ScsiModel,
    apply_csi_delay,
    cascaded_rows,
    effective_channel,
    full_csi_delay_factor,
    sample_batch,
)
from .cssca import (
    BASELINE_TAG,
    EVAL_TAG,
    TRAIN_TAG,
    TWO_PI,
    LongTermConfig,
    initial_point,
    sample_seeds,
    step_sizes,
)
from .harness.metrics import MetricsRecord
from .unfold import phase_gradient, rate_cotangents
from .wmmse import inner_products, rates_from_effective, sinr_from_effective

AO_LABEL = "AO-simplified"
DELAY_TAG = 6
AO_TAG = 7


def sinr_targets(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if np.any(R < 0):
        raise ValueError("rate targets must be non-negative")
    return 2.0**R - 1.0


# -- per-slot minimum-power beamforming ---------------------------------------

@dataclass
class MinPowerResult:
    w: np.ndarray  # (..., K, M)
    power: np.ndarray  # (...,)
    feasible: np.ndarray  # (...,) bool
    uplink: np.ndarray  # (..., K) dual powers
    iterations: int


def min_power_beamforming(h, sigma2, targets, *, max_iter=5000, tol=1e-12, cap=1e6) -> MinPowerResult:
    """Minimum total power subject to ``SINR_k >= targets[k]``, batched over leading axes.

    Dual uplink powers follow ``q_k = gamma_k / ((1 + gamma_k) g_k^H A^{-1} g_k)``
    with ``A = I + sum_j q_j g_j g_j^H`` and noise-normalized ``g = h / sigma``.
    MMSE receive directions then give the downlink powers by one linear solve.
    Slots whose dual powers exceed ``cap`` or whose downlink powers come out
    negative are marked infeasible (zero beamformers, ``nan`` power).
    """
    h = np.asarray(h, dtype=complex)
    K, M = h.shape[-2:]
    batch = h.shape[:-2]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), batch + (K,))
    gam = np.broadcast_to(np.asarray(targets, dtype=float), (K,))
    if np.any(gam < 0):
        raise ValueError("SINR targets must be non-negative")
    g = h / np.sqrt(sigma2)[..., None]
    eye = np.eye(M)
    q = np.zeros(batch + (K,))
    blown = np.zeros(batch, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        A = eye + np.einsum("...k,...km,...kn->...mn", q, g, g.conj())
        X = np.linalg.solve(A, np.swapaxes(g, -1, -2))
        quad = np.real(np.einsum("...km,...mk->...k", g.conj(), X))
        q_new = gam / ((1.0 + gam) * quad)
        blown |= np.any(q_new > cap, axis=-1)
        q_new = np.where(blown[..., None], q, q_new)
        change = np.max(np.abs(q_new - q), axis=-1) / (1.0 + np.max(q_new, axis=-1))
        q = q_new
        if np.all(blown | (change <= tol)):
            break
    else:
        blown |= change > 1e-8

    A = eye + np.einsum("...k,...km,...kn->...mn", q, g, g.conj())
    X = np.swapaxes(np.linalg.solve(A, np.swapaxes(g, -1, -2)), -1, -2)  # (..., K, M)
    v = X / np.linalg.norm(X, axis=-1, keepdims=True)
    G2 = np.abs(inner_products(g, v)) ** 2  # |g_k^H v_j|^2
    # gamma_k * SINR constraint rows: G2_kk p_k - gamma_k sum_{j!=k} G2_kj p_j = gamma_k
    D = -gam[:, None] * G2
    idx = np.arange(K)
    D[..., idx, idx] = G2[..., idx, idx]
    safe = np.where(blown[..., None, None], np.eye(K), D)
    p = np.linalg.solve(safe, np.broadcast_to(gam, batch + (K,))[..., None])[..., 0]
    feasible = ~blown & np.all(p >= -1e-12 * (1 + np.abs(p).max(initial=0)), axis=-1)
    p = np.where(feasible[..., None], np.maximum(p, 0.0), 0.0)
    w = np.sqrt(p)[..., None] * v
    power = np.where(feasible, p.sum(axis=-1), np.nan)

    # targets must be met on every feasible slot
    sinr = sinr_from_effective(h, w, sigma2)
    ok = np.all(sinr >= gam - 1e-6 * np.maximum(1.0, gam), axis=-1)
    feasible &= ok
    power = np.where(feasible, power, np.nan)
    w = np.where(feasible[..., None, None], w, 0.0)
    return MinPowerResult(w, power, feasible, q, it)


# -- evaluation plumbing ------------------------------------------------------

@dataclass
class BaselineConfig:
    R: Sequence[float]
    n_slots: int = 500
    seed: int = 0
    max_retries: int = 10
    ao_rounds: int = 3
    ao_grid: int = 16
    p_ref_dbm: float = 30.0
    delay_ms: float = 0.0
    user_speed_kmh: float = 1.0
    training: LongTermConfig | None = None


def eval_slots(scsi: ScsiModel, seed: int, n_slots: int) -> ChannelSample:
    """Held-out channel slots, shared by all schemes for a given seed."""
    return sample_batch(scsi, sample_seeds(seed, EVAL_TAG, 0, n_slots))


def outdated_estimate(scsi: ScsiModel, true: ChannelSample, seed: int, delay_ms: float,
                      user_speed_kmh: float) -> ChannelSample:
    """Channel estimate lagging the true slots by ``delay_ms``.

    The innovation stream depends only on ``seed``, so every scheme sees the
    same noise scaled by its own delay.
    """
    if delay_ms == 0:
        return true
    n = true.G.shape[0]
    innov = sample_batch(scsi, sample_seeds(seed, DELAY_TAG, 0, n))
    return apply_csi_delay(true, innov, delay_ms, user_speed_kmh, scsi.params.f_c)


def _record(label, true: ChannelSample, theta, res: MinPowerResult, n_slots, wall_ms):
    h_true = effective_channel(true, theta)
    rates = rates_from_effective(h_true, res.w, true.noise_vars)
    ok = res.feasible
    n_bad = int((~ok).sum())
    if ok.any():
        power = float(np.mean(res.power[ok]))
        avg_rates = rates[ok].mean(axis=0)
    else:
        power = float("nan")
        avg_rates = np.zeros(rates.shape[-1])
    return MetricsRecord(label, power, avg_rates, infeasible_slots=n_bad, n_slots=n_slots,
                         wall_ms=wall_ms, slot_power=res.power)


def evaluate_fixed_phases(scsi: ScsiModel, theta, cfg: BaselineConfig, label: str) -> MetricsRecord:
    """Min-power beamforming every slot with long-term phases ``theta``."""
    t0 = time.perf_counter()
    true = eval_slots(scsi, cfg.seed, cfg.n_slots)
    est = outdated_estimate(scsi, true, cfg.seed, cfg.delay_ms, cfg.user_speed_kmh)
    res = min_power_beamforming(effective_channel(est, theta), est.noise_vars, sinr_targets(cfg.R))
    theta_b = np.broadcast_to(theta, (cfg.n_slots, np.size(theta)))
    return _record(label, true, theta_b, res, cfg.n_slots, 1e3 * (time.perf_counter() - t0))


def baseline_random_phase(scsi: ScsiModel, cfg: BaselineConfig) -> MetricsRecord:
    """Uniform random phases each slot; infeasible slots redraw up to ``max_retries`` times."""
    t0 = time.perf_counter()
    N = scsi.dims.N
    true = eval_slots(scsi, cfg.seed, cfg.n_slots)
    est = outdated_estimate(scsi, true, cfg.seed, cfg.delay_ms, cfg.user_speed_kmh)
    gam = sinr_targets(cfg.R)
    theta = np.zeros((cfg.n_slots, N))
    res = None
    for attempt in range(cfg.max_retries + 1):
        draw = np.stack([np.random.default_rng(np.random.SeedSequence([cfg.seed, BASELINE_TAG, j, attempt]))
                         .uniform(0.0, TWO_PI, N) for j in range(cfg.n_slots)])
        todo = np.ones(cfg.n_slots, bool) if res is None else ~res.feasible
        if not todo.any():
            break
        theta[todo] = draw[todo]
        sub = min_power_beamforming(effective_channel(est, theta)[todo], est.noise_vars[todo], gam)
        if res is None:
            res = sub
        else:
            res.w[todo], res.power[todo], res.feasible[todo] = sub.w, sub.power, sub.feasible
    return _record("random-phase", true, theta, res, cfg.n_slots, 1e3 * (time.perf_counter() - t0))


# -- TTS sum-rate phases ------------------------------------------------------

def matched_filter_equal_power(h, p_total):
    """``w_k = sqrt(P/K) h_k / ||h_k||``."""
    K = h.shape[-2]
    nrm = np.linalg.norm(h, axis=-1, keepdims=True)
    c = np.sqrt(p_total / K)
    return c * h / np.where(nrm > 0, nrm, 1.0), nrm


def sum_rate_and_gradient(theta, batch: ChannelSample, p_total):
    """Batch-mean sum rate of the equal-power matched filter and its phase gradient."""
    h = effective_channel(batch, theta)
    w, nrm = matched_filter_equal_power(h, p_total)
    K = h.shape[-2]
    rates = rates_from_effective(h, w, batch.noise_vars)
    g_w = np.zeros_like(h)
    g_h = np.zeros_like(h)
    for k in range(K):
        gw, gh = rate_cotangents(h, w, batch.noise_vars, k)
        g_w += gw
        g_h += gh
    # chain through w_k = c h_k / ||h_k||
    c = np.sqrt(p_total / K)
    nrm = np.where(nrm > 0, nrm, 1.0)
    proj = np.real(np.sum(g_w.conj() * h, axis=-1, keepdims=True))
    g_h = g_h + c * g_w / nrm - c * proj * h / nrm**3
    grad = phase_gradient(theta, cascaded_rows(batch), g_h)
    return float(rates.sum(axis=-1).mean()), grad.mean(axis=0)


def optimize_wsr_phases(scsi: ScsiModel, lt: LongTermConfig, p_ref_w: float, phase_window: str = "box"):
    """Stochastic surrogate ascent on the expected sum rate (no constraints).

    Returns ``(theta, trace)`` with ``trace[t] = (t, f_0 estimate)`` where the
    objective is the negated sum rate.
    """
    N = scsi.dims.N
    theta, _ = initial_point(scsi, lt)
    tau = float(lt.taus(0)[0])
    f_acc, g_acc = 0.0, np.zeros(N)
    trace = []
    for t in range(lt.T_iters):
        rho, gamma = step_sizes(t, lt.rho, lt.gamma)
        batch = sample_batch(scsi, sample_seeds(lt.seed, TRAIN_TAG, t, lt.B))
        val, grad = sum_rate_and_gradient(theta, batch, p_ref_w)
        f_acc = (1 - rho) * f_acc + rho * (-val)
        g_acc = (1 - rho) * g_acc + rho * (-grad)
        if phase_window == "periodic":
            box = qcqp.BoxDomain(theta - np.pi, theta + np.pi)
        else:
            box = qcqp.BoxDomain(np.zeros(N), np.full(N, TWO_PI))
        obj = qcqp.ProxQuadratic(f_acc, g_acc, tau, theta)
        theta_bar = qcqp.solve_constrained(obj, [], box).x
        theta = np.mod((1 - gamma) * theta + gamma * theta_bar, TWO_PI)
        trace.append((t, f_acc))
    return theta, trace


def baseline_tts_wsrmax(scsi: ScsiModel, cfg: BaselineConfig, phase_window: str = "box"):
    """Train sum-rate phases, then min-power beamforming per held-out slot."""
    lt = cfg.training or LongTermConfig(R=cfg.R, seed=cfg.seed)
    t0 = time.perf_counter()
    theta, _ = optimize_wsr_phases(scsi, lt, 10 ** ((cfg.p_ref_dbm - 30) / 10), phase_window)
    rec = evaluate_fixed_phases(scsi, theta, cfg, "TTS-WSRMax")
    rec.wall_ms = 1e3 * (time.perf_counter() - t0)
    return theta, rec


# -- simplified instantaneous-CSI alternating optimization ------------------

def _margins(s, sigma2, gam):
    p = np.abs(s) ** 2
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    sinr = sig / (p.sum(axis=-1) - sig + sigma2)
    return np.min(np.where(gam > 0, sinr / np.where(gam > 0, gam, 1.0), np.inf), axis=-1)


def phase_sweep(sample: ChannelSample, theta, w, gam, levels: int = 16):
    """One pass of per-element phase updates maximizing ``min_k SINR_k / gamma_k`` at fixed ``w``.

    Candidates per element are a uniform grid, the phase aligning each user's
    own-signal term, and the current value (so the margin never decreases).
    """
    theta = np.array(theta, dtype=float)
    V = cascaded_rows(sample)  # (S, K, N, M)
    h = effective_channel(sample, theta)
    s = inner_products(h, w)  # (S, K, K)
    grid = TWO_PI * np.arange(levels) / levels
    K = w.shape[-2]
    idx = np.arange(K)
    for n in range(theta.shape[-1]):
        t_n = np.einsum("skm,sjm->skj", V[:, :, n, :].conj(), w)  # element-n part of s, before its phase
        rest = s - np.exp(1j * theta[:, n])[:, None, None] * t_n
        align = np.angle(rest[:, idx, idx]) - np.angle(t_n[:, idx, idx])
        cand = np.concatenate([theta[:, n:n + 1], np.broadcast_to(grid, (len(theta), levels)),
                               np.mod(align, TWO_PI)], axis=1)  # (S, C)
        s_c = rest[:, None] + np.exp(1j * cand)[..., None, None] * t_n[:, None]
        m = _margins(s_c, sample.noise_vars[:, None], gam)
        best = np.argmax(m, axis=1)  # ties keep the current phase (index 0)
        theta[:, n] = cand[np.arange(len(theta)), best]
        s = s_c[np.arange(len(theta)), best]
    return theta


def ao_slots(est: ChannelSample, theta0, gam, rounds: int = 3, levels: int = 16):
    """Alternate min-power beamforming and phase sweeps; returns ``(theta, result, power_history)``.

    A round whose phases raise the power (or lose feasibility) is reverted,
    so the per-slot power is non-increasing across rounds.
    """
    theta = np.array(theta0, dtype=float)
    res = min_power_beamforming(effective_channel(est, theta), est.noise_vars, gam)
    history = [res.power.copy()]
    for _ in range(rounds):
        h = effective_channel(est, theta)
        w_ref = np.where(res.feasible[:, None, None], res.w,
                         h / np.maximum(np.linalg.norm(h, axis=(-2, -1), keepdims=True), 1e-300))
        theta_new = phase_sweep(est, theta, w_ref, gam, levels)
        cand = min_power_beamforming(effective_channel(est, theta_new), est.noise_vars, gam)
        better = cand.feasible & (~res.feasible | (cand.power <= res.power))
        theta = np.where(better[:, None], theta_new, theta)
        res = MinPowerResult(
            w=np.where(better[:, None, None], cand.w, res.w),
            power=np.where(better, cand.power, res.power),
            feasible=res.feasible | cand.feasible,
            uplink=np.where(better[:, None], cand.uplink, res.uplink),
            iterations=max(res.iterations, cand.iterations),
        )
        history.append(res.power.copy())
    return theta, res, np.array(history)


def baseline_icsi_ao(scsi: ScsiModel, cfg: BaselineConfig) -> MetricsRecord:
    """Per-slot simplified AO on the full (delayed) channel estimate."""
    t0 = time.perf_counter()
    d = scsi.dims
    true = eval_slots(scsi, cfg.seed, cfg.n_slots)
    delay = cfg.delay_ms * full_csi_delay_factor(d.M, d.N, d.K)
    est = outdated_estimate(scsi, true, cfg.seed, delay, cfg.user_speed_kmh)
    theta0 = np.stack([np.random.default_rng(np.random.SeedSequence([cfg.seed, AO_TAG, j]))
                       .uniform(0.0, TWO_PI, d.N) for j in range(cfg.n_slots)])
    theta, res, _ = ao_slots(est, theta0, sinr_targets(cfg.R), cfg.ao_rounds, cfg.ao_grid)
    return _record(AO_LABEL, true, theta, res, cfg.n_slots, 1e3 * (time.perf_counter() - t0))
