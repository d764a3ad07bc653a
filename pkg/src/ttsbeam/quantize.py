"""Discrete phase shifts: project converged phases onto a uniform grid and
re-run the long-term loop with the phases frozen so only the multipliers adapt.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .channel import ScsiModel
from .cssca import TWO_PI, LongTermConfig, LongTermResult, optimize_long_term


@dataclass(frozen=True)
class DiscreteGrid:
    """``L = 2^Q_bits`` uniformly spaced phases starting at 0."""

    Q_bits: int

    def __post_init__(self):
        if int(self.Q_bits) != self.Q_bits or self.Q_bits < 1:
            raise ValueError("Q_bits must be an integer >= 1")

    @property
    def L(self) -> int:
        return 2 ** int(self.Q_bits)

    @property
    def step(self) -> float:
        return TWO_PI / self.L

    @property
    def points(self) -> np.ndarray:
        return self.step * np.arange(self.L)


def circular_distance(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def project_phases(theta, grid: DiscreteGrid | None) -> np.ndarray:
    """Nearest grid point in circular distance; exact ties go to the smaller grid value.

    ``grid=None`` is the unquantized passthrough.
    """
    theta = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    if grid is None:
        return theta.copy()
    pos = theta / grid.step
    lo = np.floor(pos)
    frac = pos - lo
    lo_idx = lo.astype(int) % grid.L
    hi_idx = (lo_idx + 1) % grid.L
    tie_idx = np.minimum(lo_idx, hi_idx)
    idx = np.where(frac > 0.5, hi_idx, np.where(frac < 0.5, lo_idx, tie_idx))
    return idx * grid.step


def reoptimize_multipliers(scsi: ScsiModel, theta_d, cfg: LongTermConfig, lam_init=None) -> LongTermResult:
    """Long-term loop with the phase block pinned at ``theta_d``.

    The short-term iteration count ``J`` is left unchanged.
    """
    run = replace(cfg, theta_init=np.asarray(theta_d, dtype=float), freeze_theta=True)
    if lam_init is not None:
        run = replace(run, lam_init=np.asarray(lam_init, dtype=float))
    return optimize_long_term(scsi, run)
