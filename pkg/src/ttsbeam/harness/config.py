"""Experiment configuration: YAML files layered over named presets.

A config file may name a ``preset`` and override any subset of its keys::

    preset: desk-scale
    long_term: {T_iters: 300}
    sweep: {axis: N, values: [8, 16, 32]}
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from ..channel import PathLossParams, ScsiModel, SystemDims, build_scsi_model
from ..cssca import LongTermConfig, Schedule

SCHEMES = ("PDD-TJAPB", "TTS-WSRMax", "random-phase", "AO-simplified")
SWEEP_AXES = ("beta", "N", "delay", "targets")

_FULL = {
    "system": {"M": 6, "N_y": 4, "N_z": 10, "K": 3},
    "channel": {
        "beta_AI": 0.8, "beta_Iu": 0.8, "beta_Au": 0.0, "n_clusters": 5, "noise_dbm": -80.0,
        "C0_db": -30.0, "alpha_Au": 3.6, "alpha_AI": 2.2, "alpha_Iu": 2.2,
        "ap_position": [2.0, 0.0, 0.0], "irs_position": [0.0, 50.0, 3.0],
        "d_A": 0.5, "d_I": 0.125, "f_c": 5.0e9,
    },
    "targets": {"R": [4.0, 4.0, 4.0]},
    "long_term": {
        "B": 10, "J": 10, "T_iters": 200, "tau": 0.01,
        "rho": {"scale": 2.0, "offset": 2.0, "exponent": 0.9},
        "gamma": {"scale": 2.0, "offset": 2.0, "exponent": 1.0},
        "lam_cap": 1.0e6, "lam_init": 1.0,
    },
    "evaluation": {"n_slots": 2000, "T_s": 2000},
    "baselines": {"max_retries": 10, "ao_rounds": 3, "ao_grid": 16, "p_ref_dbm": 30.0},
    "delay": {"user_speed_kmh": 1.0, "delay_ms": 0.0},
    "quantize": {"bits": [1, 2, 3]},
    "sweep": {"axis": "beta", "values": [0.0, 0.4, 0.8], "seeds": [0], "schemes": list(SCHEMES)},
    "seed": 0,
}

_DESK = copy.deepcopy(_FULL)
_DESK["system"] = {"M": 4, "N_y": 4, "N_z": 4, "K": 2}
_DESK["targets"] = {"R": [3.0, 3.0]}
_DESK["long_term"].update({"B": 4, "J": 5, "T_iters": 200})
# a half-size first smoothing step; see the decisions ledger
_DESK["long_term"]["gamma"] = {"scale": 1.0, "offset": 2.0, "exponent": 1.0}
_DESK["evaluation"] = {"n_slots": 500, "T_s": 2000}

PRESETS = {"full-scale": _FULL, "desk-scale": _DESK}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Thin typed view over the nested dict; ``data`` is the source of truth."""

    data: dict

    def __post_init__(self):
        self.validate()

    # construction -----------------------------------------------------------
    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(copy.deepcopy(PRESETS[name]))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        base = PRESETS.get(d.pop("preset", "desk-scale"))
        if base is None:
            raise KeyError("unknown preset in config")
        return cls(deep_merge(base, d))

    @classmethod
    def load(cls, path_or_preset) -> "ExperimentConfig":
        if str(path_or_preset) in PRESETS:
            return cls.preset(str(path_or_preset))
        text = Path(path_or_preset).read_text()
        return cls.from_dict(yaml.safe_load(text) or {})

    def override(self, **sections) -> "ExperimentConfig":
        return ExperimentConfig(deep_merge(self.data, sections))

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    # checks -----------------------------------------------------------------
    def validate(self):
        s = self.data["system"]
        for key in ("M", "N_y", "N_z", "K"):
            if int(s[key]) < 1:
                raise ValueError(f"system.{key} must be >= 1")
        if len(self.R) != s["K"]:
            raise ValueError("targets.R needs one entry per user")
        lt = self.data["long_term"]
        for key in ("B", "J", "T_iters"):
            if int(lt[key]) < 1:
                raise ValueError(f"long_term.{key} must be >= 1")
        if float(lt["tau"]) <= 0:
            raise ValueError("long_term.tau must be positive")
        if int(self.data["evaluation"]["n_slots"]) < 1:
            raise ValueError("evaluation.n_slots must be >= 1")
        sw = self.data["sweep"]
        if sw["axis"] not in SWEEP_AXES:
            raise ValueError(f"sweep.axis must be one of {SWEEP_AXES}")
        if not sw["values"]:
            raise ValueError("sweep.values must not be empty")
        if not sw["schemes"]:
            raise ValueError("sweep.schemes must not be empty")
        unknown = set(sw["schemes"]) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}")

    # typed views ------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def R(self) -> list:
        return [float(r) for r in self.data["targets"]["R"]]

    @property
    def dims(self) -> SystemDims:
        s = self.data["system"]
        return SystemDims(M=int(s["M"]), N_y=int(s["N_y"]), N_z=int(s["N_z"]), K=int(s["K"]))

    @property
    def n_slots(self) -> int:
        return int(self.data["evaluation"]["n_slots"])

    @property
    def T_s(self) -> int:
        return int(self.data["evaluation"]["T_s"])

    def path_loss(self) -> PathLossParams:
        c = self.data["channel"]
        return PathLossParams(
            C0_db=c["C0_db"], alpha_Au=c["alpha_Au"], alpha_AI=c["alpha_AI"], alpha_Iu=c["alpha_Iu"],
            ap_position=tuple(c["ap_position"]), irs_position=tuple(c["irs_position"]),
            d_A=c["d_A"], d_I=c["d_I"], f_c=c["f_c"],
        )

    def scsi(self, seed: int | None = None) -> ScsiModel:
        c = self.data["channel"]
        return build_scsi_model(
            self.dims, self.path_loss(), beta_AI=c["beta_AI"], beta_Iu=c["beta_Iu"], beta_Au=c["beta_Au"],
            n_clusters=int(c["n_clusters"]), noise_dbm=c["noise_dbm"],
            seed=self.seed if seed is None else seed,
        )

    def long_term(self, seed: int | None = None) -> LongTermConfig:
        lt = self.data["long_term"]
        return LongTermConfig(
            R=self.R, B=int(lt["B"]), J=int(lt["J"]), T_iters=int(lt["T_iters"]), tau=lt["tau"],
            rho=Schedule(**lt["rho"]), gamma=Schedule(**lt["gamma"]),
            lam_cap=float(lt["lam_cap"]), lam_init=lt["lam_init"],
            seed=self.seed if seed is None else seed,
        )

    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
