"""Per-run metrics and the fixed CSV schema shared by every scheme."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..channel import watts_to_dbm


def fmt(x) -> str:
    """Stable text form for CSV cells (byte-identical across runs)."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if np.isnan(x) else f"{x:.10g}"


@dataclass
class MetricsRecord:
    """Averages over held-out slots for one scheme and one configuration.

    Slots where a scheme cannot meet its per-slot targets are counted in
    ``infeasible_slots`` and excluded from ``power_w`` and ``rates``.
    """

    scheme: str
    power_w: float
    rates: np.ndarray
    infeasible_slots: int = 0
    n_slots: int = 0
    axis: str = ""
    seed: int = 0
    wall_ms: float | None = None
    config_hash: str = ""
    slot_power: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        if np.any(self.rates < 0):
            raise ValueError("rates must be non-negative")

    @property
    def power_dbm(self) -> float:
        if np.isnan(self.power_w):
            return float("nan")  # every slot infeasible
        return float(watts_to_dbm(self.power_w)) if self.power_w > 0 else float("-inf")

    @property
    def worst_rate(self) -> float:
        return float(self.rates.min()) if self.rates.size else float("nan")

    @property
    def K(self) -> int:
        return self.rates.size

    def with_context(self, **kw) -> "MetricsRecord":
        for k, v in kw.items():
            setattr(self, k, v)
        return self


def csv_header(K: int) -> list[str]:
    return ["scheme", "axis", "seed", "power_dBm", *[f"rate_user_{k + 1}" for k in range(K)],
            "worst_rate", "infeasible_slots", "wall_ms", "config_hash"]


def csv_row(rec: MetricsRecord, timing: bool = False) -> list[str]:
    return [rec.scheme, rec.axis, fmt(rec.seed), fmt(rec.power_dbm), *[fmt(r) for r in rec.rates],
            fmt(rec.worst_rate), fmt(rec.infeasible_slots),
            fmt(rec.wall_ms) if timing else "", rec.config_hash]


def records_to_csv(records, timing: bool = False) -> str:
    if not records:
        raise ValueError("no records to write")
    K = max(r.K for r in records)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(csv_header(K))
    for r in records:
        wr.writerow(csv_row(r, timing))
    return buf.getvalue()
