"""Experiment configuration (TOML) with defaults for every open setting."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import tomli

from .ansatz import ModelConfig
from .operators import (
    build_heisenberg_chain,
    build_lowering_jumps,
    build_tfi_chain,
    build_tfi_grid,
    relabel_sites,
    single_site_lindbladian,
    vectorized_lindbladian,
)
from .sampler import SamplerConfig
from .spinspace import snake_order
from .vmc import PAPER_LR, PAPER_SHIFT, OptimizerConfig, ScheduleSpec, rescaled

MODEL_KINDS = ("tfi_chain", "tfi_grid", "heisenberg_chain")
SITE_ORDERS = ("row_major", "snake")
SWEEPABLE = ("g", "V", "gamma", "Jx", "Jy", "Jz", "Bx", "By", "Bz")

DEFAULTS = {
    "seed": 0,
    "model": {
        "kind": "tfi_chain",
        "sites": 4,
        "dims": [2, 2],
        "V": 2.0,
        "g": 1.0,
        "J": [1.4, 2.0, 1.0],
        "B": [-1.0, 0.0, 0.1],
        "gamma": 1.0,
        "jumps": "lowering",
        "site_order": "row_major",
    },
    "ansatz": {"conv_channels": [8, 16], "heads": 2, "activation": "gelu", "seed": 0},
    "sampler": {"n_chains": 128, "samples_per_chain": 8, "burn_in": 8, "thinning": None},
    "optimizer": {
        "kind": "sgd",
        "iterations": 2000,
        "checkpoint_every": 100,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "max_step": 1.0,
        "lr": {"base": 0.03, "switch_step": None, "decay_steps": None,
               "floor_fraction": PAPER_LR.floor_fraction, "schedule": True},
        "shift": {"base": 0.05, "switch_step": None, "decay_steps": None,
                  "floor_fraction": PAPER_SHIFT.floor_fraction, "schedule": True},
    },
    "evaluate": {"n_chains": 32, "samples_per_chain": 2000, "burn_in": 500,
                 "thinning": None, "seed": 1234},
    "benchmark": {"tolerance": 0.02},
    "sweep": {"parameter": None, "values": []},
    "output": {"dir": "runs"},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{path}{key}.")
        elif isinstance(base[key], dict) and key in ("lr", "shift"):
            out[key] = dict(base[key], base=float(val))
        else:
            out[key] = val
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    source: str | None = None

    @classmethod
    def from_dict(cls, data: dict, source=None) -> "ExperimentConfig":
        cfg = cls(_merge(DEFAULTS, data), source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh), str(path))

    def validate(self):
        m = self.raw["model"]
        if m["kind"] not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
        if m["site_order"] not in SITE_ORDERS:
            raise ConfigError(f"model.site_order must be one of {SITE_ORDERS}")
        if m["jumps"] != "lowering":
            raise ConfigError("only model.jumps = 'lowering' is implemented")
        sw = self.raw["sweep"]
        if sw["parameter"] is not None:
            if sw["parameter"] not in SWEEPABLE:
                raise ConfigError(f"sweep.parameter must be one of {SWEEPABLE}")
            if not sw["values"]:
                raise ConfigError("sweep.values is empty")
        self.sampler()
        self.optimizer()
        self.model_config()

    # ------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return ExperimentConfig(raw, self.source)

    @property
    def n_sites(self) -> int:
        m = self.raw["model"]
        if m["kind"] == "tfi_grid":
            return int(m["dims"][0]) * int(m["dims"][1])
        return int(m["sites"])

    def sweep_points(self) -> list[tuple[str | None, float | None]]:
        sw = self.raw["sweep"]
        if sw["parameter"] is None:
            return [(None, None)]
        return [(sw["parameter"], float(v)) for v in sw["values"]]

    def model_params(self, param: str | None = None, value: float | None = None) -> dict:
        m = copy.deepcopy(self.raw["model"])
        if param is not None:
            if param in ("g", "V", "gamma"):
                m[param] = value
            else:
                vec = "J" if param[0] == "J" else "B"
                m[vec][["x", "y", "z"].index(param[1])] = value
        return m

    def superoperator(self, param=None, value=None):
        m = self.model_params(param, value)
        gamma = float(m["gamma"])
        if m["kind"] == "tfi_chain" and int(m["sites"]) == 1:
            # no bonds on one site; the field-only generator
            return single_site_lindbladian(float(m["g"]), gamma)
        if m["kind"] == "tfi_chain":
            h = build_tfi_chain(int(m["sites"]), float(m["V"]), float(m["g"]))
        elif m["kind"] == "tfi_grid":
            h = build_tfi_grid(int(m["dims"][0]), int(m["dims"][1]), float(m["V"]), float(m["g"]))
            if m["site_order"] == "snake":
                # the network's ring shift then walks the lattice instead of wrapping rows
                h = relabel_sites(h, snake_order(h.geometry))
        else:
            h = build_heisenberg_chain(int(m["sites"]), m["J"], m["B"])
        return vectorized_lindbladian(h, build_lowering_jumps(h.n_sites, gamma))

    def model_config(self) -> ModelConfig:
        a = self.raw["ansatz"]
        return ModelConfig(
            sites=self.n_sites,
            conv_channels=tuple(a["conv_channels"]),
            heads=int(a["heads"]),
            activation=a["activation"],
            seed=int(a["seed"]),
        )

    def sampler(self, section: str = "sampler") -> SamplerConfig:
        s = self.raw[section]
        return SamplerConfig(
            n_chains=int(s["n_chains"]),
            samples_per_chain=int(s["samples_per_chain"]),
            burn_in=s["burn_in"],
            thinning=s["thinning"],
        )

    def _schedule(self, sec: dict, paper: ScheduleSpec, iterations: int) -> ScheduleSpec:
        if not sec.get("schedule", True):
            return ScheduleSpec.constant(float(sec["base"]))
        spec = ScheduleSpec(float(sec["base"]), paper.switch_step, paper.decay_steps,
                            float(sec["floor_fraction"]))
        if sec["switch_step"] is None or sec["decay_steps"] is None:
            return rescaled(spec, iterations)
        return ScheduleSpec(spec.base, int(sec["switch_step"]), int(sec["decay_steps"]),
                            spec.floor_fraction)

    def optimizer(self) -> OptimizerConfig:
        o = self.raw["optimizer"]
        its = int(o["iterations"])
        if its < 1:
            raise ConfigError("optimizer.iterations must be positive")
        return OptimizerConfig(
            kind=o["kind"],
            iterations=its,
            lr=self._schedule(o["lr"], PAPER_LR, its),
            shift=self._schedule(o["shift"], PAPER_SHIFT, its),
            beta1=float(o["beta1"]),
            beta2=float(o["beta2"]),
            eps=float(o["eps"]),
            checkpoint_every=int(o["checkpoint_every"]),
            max_step=float(o["max_step"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
