"""Monte-Carlo evaluation, overhead accounting, sweeps and the gradient check."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import baselines as bl
from .. import unfold
from ..channel import ChannelSample, ScsiModel, effective_channel
from ..cssca import LongTermResult, optimize_long_term
from ..quantize import DiscreteGrid, project_phases, reoptimize_multipliers
from ..wmmse import ShortTermProblem, rates_from_effective, solve_short_term
from .config import ExperimentConfig
from .metrics import MetricsRecord

PDD_LABEL = "PDD-TJAPB"


# -- evaluation ---------------------------------------------------------------

def evaluate_policy(theta, lam, scsi: ScsiModel, n_slots: int, J: int, R, seed: int = 0,
                    delay_ms: float = 0.0, user_speed_kmh: float = 1.0) -> MetricsRecord:
    """Short-term WMMSE on held-out slots with long-term ``(theta, lam)``.

    Beamformers are designed on the (possibly outdated) effective channel and
    rates are measured on the true one.
    """
    t0 = time.perf_counter()
    true = bl.eval_slots(scsi, seed, n_slots)
    est = bl.outdated_estimate(scsi, true, seed, delay_ms, user_speed_kmh)
    sol = solve_short_term(ShortTermProblem(effective_channel(est, theta), lam, R, est.noise_vars), J)
    rates = rates_from_effective(effective_channel(true, theta), sol.w, true.noise_vars)
    return MetricsRecord(PDD_LABEL, float(sol.power.mean()), rates.mean(axis=0), n_slots=n_slots,
                         wall_ms=1e3 * (time.perf_counter() - t0), slot_power=sol.power)


def overhead_report(M: int, K: int, N: int, T_s: int):
    """Channel-estimation and phase-signaling counts.

    Returns ``(per_slot_tts, per_slot_icsi, per_interval_tts, per_interval_icsi)``:
    effective-channel vs. full-channel coefficients per slot, and phase
    updates per long-term interval of ``T_s`` slots.
    """
    for name, v in (("M", M), ("K", K), ("N", N), ("T_s", T_s)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    return M * K, N * M + N * K + M * K, N, T_s * N


# -- scheme runners -----------------------------------------------------------

def _baseline_cfg(cfg: ExperimentConfig, seed: int) -> bl.BaselineConfig:
    b = cfg.data["baselines"]
    d = cfg.data["delay"]
    return bl.BaselineConfig(
        R=cfg.R, n_slots=cfg.n_slots, seed=seed, max_retries=int(b["max_retries"]),
        ao_rounds=int(b["ao_rounds"]), ao_grid=int(b["ao_grid"]), p_ref_dbm=float(b["p_ref_dbm"]),
        delay_ms=float(d["delay_ms"]), user_speed_kmh=float(d["user_speed_kmh"]),
        training=cfg.long_term(seed),
    )


def run_pdd(cfg: ExperimentConfig, seed: int, trained: LongTermResult | None = None):
    """Train (unless given) and evaluate the proposed scheme; returns ``(record, result)``."""
    t0 = time.perf_counter()
    scsi = cfg.scsi(seed)
    res = trained or optimize_long_term(scsi, cfg.long_term(seed))
    d = cfg.data["delay"]
    rec = evaluate_policy(res.theta, res.lam, scsi, cfg.n_slots, cfg.long_term(seed).J, cfg.R, seed,
                          float(d["delay_ms"]), float(d["user_speed_kmh"]))
    rec.wall_ms = 1e3 * (time.perf_counter() - t0)
    return rec, res


def run_scheme(cfg: ExperimentConfig, scheme: str, seed: int, cache: dict | None = None) -> MetricsRecord:
    """One scheme on one configuration.  ``cache`` reuses long-term training across delay values."""
    cache = {} if cache is None else cache
    key_cfg = cfg.override(delay={"delay_ms": 0.0})
    key = (scheme, seed, key_cfg.hash())
    if scheme == PDD_LABEL:
        rec, res = run_pdd(cfg, seed, cache.get(key))
        cache[key] = res
    elif scheme == "TTS-WSRMax":
        bc = _baseline_cfg(cfg, seed)
        scsi = cfg.scsi(seed)
        if key not in cache:
            cache[key], _ = bl.optimize_wsr_phases(scsi, bc.training, 10 ** ((bc.p_ref_dbm - 30) / 10))
        rec = bl.evaluate_fixed_phases(scsi, cache[key], bc, "TTS-WSRMax")
    elif scheme == "random-phase":
        rec = bl.baseline_random_phase(cfg.scsi(seed), _baseline_cfg(cfg, seed))
    elif scheme == bl.AO_LABEL:
        rec = bl.baseline_icsi_ao(cfg.scsi(seed), _baseline_cfg(cfg, seed))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return rec.with_context(seed=seed, config_hash=cfg.hash())


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "beta":
        return cfg.override(channel={"beta_AI": float(value), "beta_Iu": float(value)})
    if axis == "N":
        N_y = int(cfg.data["system"]["N_y"])
        if int(value) % N_y:
            raise ValueError(f"N={value} is not a multiple of N_y={N_y}")
        return cfg.override(system={"N_z": int(value) // N_y})
    if axis == "delay":
        return cfg.override(delay={"delay_ms": float(value)})
    if axis == "targets":
        R = [float(r) for r in value]
        return cfg.override(targets={"R": R})
    raise ValueError(f"unknown sweep axis {axis!r}")


def axis_label(axis: str, value) -> str:
    if axis == "targets":
        return "R=" + "/".join(f"{float(r):g}" for r in value)
    return f"{axis}={float(value):g}" if axis != "N" else f"N={int(value)}"


def _run_seed(cfg: ExperimentConfig, axis: str, values, schemes, seed: int):
    cache: dict = {}
    out = []
    for v in values:
        cell_cfg = apply_axis(cfg, axis, v)
        for scheme in schemes:
            rec = run_scheme(cell_cfg, scheme, seed, cache)
            out.append(rec.with_context(axis=axis_label(axis, v), config_hash=cfg.hash()))
    return out


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> list[MetricsRecord]:
    """All (axis value, scheme, seed) cells in deterministic order.

    Cells of different seeds may run in separate processes
    (``TTSBEAM_THREADS``); rows are always assembled in seed-major order.
    """
    sw = cfg.data["sweep"]
    axis, values, schemes = sw["axis"], list(sw["values"]), list(sw["schemes"])
    if not schemes:
        raise ValueError("no schemes selected")
    seeds = [int(s) for s in sw["seeds"]]
    workers = workers or int(os.environ.get("TTSBEAM_THREADS", "1"))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_seed, *zip(*[(cfg, axis, values, schemes, s) for s in seeds])))
    else:
        parts = [_run_seed(cfg, axis, values, schemes, s) for s in seeds]
    return [r for part in parts for r in part]


def rate_target_table(cfg: ExperimentConfig, unequal, equal=None, schemes=None, seed: int | None = None):
    """Power under unequal vs. equal per-user targets with the same sum.

    Returns rows ``(scheme, power_unequal_dBm, power_equal_dBm, diff_dB)`` with
    ``diff_dB = 10 log10(P_unequal / P_equal)``.
    """
    unequal = [float(r) for r in unequal]
    if equal is None:
        equal = [sum(unequal) / len(unequal)] * len(unequal)
    schemes = schemes or cfg.data["sweep"]["schemes"]
    seed = cfg.seed if seed is None else seed
    rows = []
    for scheme in schemes:
        p_u = run_scheme(apply_axis(cfg, "targets", unequal), scheme, seed)
        p_e = run_scheme(apply_axis(cfg, "targets", equal), scheme, seed)
        rows.append((scheme, p_u.power_dbm, p_e.power_dbm, 10 * np.log10(p_u.power_w / p_e.power_w)))
    return rows


# -- discrete phases ------------------------------------------------------------

def quantize_pipeline(cfg: ExperimentConfig, bits_list, seed: int | None = None,
                      trained: LongTermResult | None = None) -> list[MetricsRecord]:
    """Continuous run, then per resolution: project, re-fit multipliers, evaluate.

    ``bits=None`` in ``bits_list`` is the unquantized reference (label ``Q=inf``).
    """
    seed = cfg.seed if seed is None else seed
    scsi = cfg.scsi(seed)
    lt = cfg.long_term(seed)
    res = trained or optimize_long_term(scsi, lt)
    out = []
    for bits in bits_list:
        t0 = time.perf_counter()
        grid = None if bits is None else DiscreteGrid(int(bits))
        theta_d = project_phases(res.theta, grid)
        lam_d = reoptimize_multipliers(scsi, theta_d, lt).lam
        rec = evaluate_policy(theta_d, lam_d, scsi, cfg.n_slots, lt.J, cfg.R, seed)
        rec.wall_ms = 1e3 * (time.perf_counter() - t0)
        out.append(rec.with_context(axis="Q=inf" if bits is None else f"Q={int(bits)}", seed=seed,
                                    config_hash=cfg.hash()))
    return out


# -- gradient check -------------------------------------------------------------

@dataclass
class GradCheckRow:
    instance: int
    output: str  # "power" or "rate_k"
    wrt: str  # "theta" or "lambda"
    rel_error: float
    passed: bool


def random_instance(rng: np.random.Generator, M: int, N: int, K: int, noise: float = 0.1) -> ChannelSample:
    def cn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)

    return ChannelSample(cn(N, M), cn(K, N), cn(K, M), np.full(K, noise))


def _outputs(theta, lam, sample, J):
    sol, _ = unfold.record_and_solve(theta, lam, sample, J)
    return np.concatenate([[sol.power], sol.rates])


def _fd(fun, x, eps):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((fun(x + e) - fun(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)  # (K+1, n)


def gradcheck(n_instances=20, M=2, N=4, K=2, J=3, seed=0, tol=1e-5, steps=(1e-4, 1e-5)):
    """Unrolled VJPs vs. central differences; error is the min over ``steps``."""
    rows = []
    for i in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C, i]))
        sample = random_instance(rng, M, N, K)
        theta = rng.uniform(0, 2 * np.pi, N)
        lam = rng.uniform(0.5, 2.0, K)
        _, tape = unfold.record_and_solve(theta, lam, sample, J)
        through, direct = unfold.vjp_all(tape)
        ana = {"theta": through.d_theta + direct, "lambda": through.d_lambda}
        funs = {"theta": (lambda x: _outputs(x, lam, sample, J), theta),
                "lambda": (lambda x: _outputs(theta, x, sample, J), lam)}
        for wrt, (fun, x0) in funs.items():
            errs = []
            for eps in steps:
                num = _fd(fun, x0, eps)
                errs.append(np.max(np.abs(ana[wrt] - num), axis=1)
                            / np.maximum(np.max(np.abs(num), axis=1), 1e-12))
            err = np.min(errs, axis=0)
            for k, e in enumerate(err):
                name = "power" if k == 0 else f"rate_{k}"
                rows.append(GradCheckRow(i, name, wrt, float(e), bool(e <= tol)))
    return rows
