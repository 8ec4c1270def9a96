"""Run configuration: a YAML document with nested sections.

Example (the reference setup)::

    experiment: gap_sweep
    method: zigzag            # standard | zigzag | end2end | resample
    cond: 0
    trajectories: 256
    seed: 0
    output_dir: runs/gap_sweep
    mixture: {means: [[2.0, 0.0], [-2.0, 0.0]], sigma2: 1.0, weights: [0.5, 0.5]}
    schedule: {kind: linear, T: 10, beta_min: 1.0e-4, beta_max: 0.02}
    sampler: {gamma1: 5.5, gamma2: 0.0, lambda: 9, k: 1, eta: 0.0, s: 0.0}
    model: {kind: analytic}   # or {kind: checkpoint, path: model.npz}
    sweep: {axis: gap, values: [0.0, 1.0, 2.5, 5.5]}

Omitted keys fall back to the reference values. The environment variable
``ZIGZAG_LAB_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .sampler import SamplerConfig
from .schedule import NoiseSchedule, build_schedule
from .score import MixtureSpec

OUTPUT_DIR_ENV = "ZIGZAG_LAB_OUTPUT_DIR"
SWEEP_AXES = ("gap", "lambda", "k", "s", "eta")
METHODS = ("standard", "zigzag", "end2end", "resample")

REFERENCE: Dict[str, Any] = {
    "experiment": "reference",
    "method": "zigzag",
    "cond": 0,
    "trajectories": 256,
    "seed": 0,
    "repeats": 1,
    "output_dir": "runs/reference",
    "mixture": {"means": [[2.0, 0.0], [-2.0, 0.0]], "sigma2": 1.0, "weights": [0.5, 0.5]},
    "schedule": {"kind": "linear", "T": 10, "beta_min": 1e-4, "beta_max": 0.02},
    "sampler": {"gamma1": 5.5, "gamma2": 0.0, "lambda": 9, "k": 1, "eta": 0.0, "s": 0.0,
                "exact_inversion": False},
    "model": {"kind": "analytic", "path": None},
    "sweep": {"axis": "gap", "values": [0.0, 1.0, 2.5, 5.5]},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (over or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    experiment: str
    mixture: MixtureSpec
    schedule_params: Dict[str, Any]
    sampler: SamplerConfig
    sweep_axis: str
    sweep_values: List[float]
    trajectories: int
    output_dir: Path
    seed: int
    method: str = "zigzag"
    cond: int = 0
    repeats: int = 1
    model_kind: str = "analytic"
    model_path: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    def build_schedule(self) -> NoiseSchedule:
        p = self.schedule_params
        return build_schedule(p["kind"], int(p["T"]), float(p["beta_min"]), float(p["beta_max"]))

    @property
    def ref_seed(self) -> int:
        # reference samples for the energy distance use their own stream
        return self.seed + 1_000_003

    @classmethod
    def from_dict(cls, data: Optional[dict] = None, env: Optional[dict] = None) -> "RunConfig":
        env = os.environ if env is None else env
        d = _merge(REFERENCE, data or {})
        unknown = set(d) - set(REFERENCE)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            mix = d["mixture"]
            weights = mix.get("weights")
            if weights is None:
                mixture = MixtureSpec.uniform(mix["means"], float(mix["sigma2"]))
            else:
                mixture = MixtureSpec(means=mix["means"], sigma2=float(mix["sigma2"]), weights=weights)
            sp = d["sampler"]
            unknown = set(sp) - set(REFERENCE["sampler"]) - {"fp_max_iter", "fp_tol"}
            if unknown:
                raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
            sampler = SamplerConfig(
                T=int(d["schedule"]["T"]),
                gamma1=float(sp["gamma1"]),
                gamma2=float(sp["gamma2"]),
                lam=int(sp["lambda"]),
                k=int(sp["k"]),
                eta=float(sp["eta"]),
                s=float(sp["s"]),
                seed=int(d["seed"]),
                exact_inversion=bool(sp.get("exact_inversion", False)),
                fp_max_iter=int(sp.get("fp_max_iter", 50)),
                fp_tol=float(sp.get("fp_tol", 1e-10)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        sweep = d["sweep"] or {}
        axis = sweep.get("axis")
        values = list(sweep.get("values") or [])
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
        if not values:
            raise ConfigError("sweep grid must be nonempty")
        if int(d["trajectories"]) < 1:
            raise ConfigError("trajectory count must be >= 1")
        if d["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {d['method']!r}")
        model = d["model"] or {}
        if model.get("kind", "analytic") not in ("analytic", "checkpoint"):
            raise ConfigError("model.kind must be 'analytic' or 'checkpoint'")
        if model.get("kind") == "checkpoint" and not model.get("path"):
            raise ConfigError("model.kind 'checkpoint' needs model.path")
        out = env.get(OUTPUT_DIR_ENV) or d["output_dir"]
        return cls(
            experiment=str(d["experiment"]),
            mixture=mixture,
            schedule_params=dict(d["schedule"]),
            sampler=sampler,
            sweep_axis=axis,
            sweep_values=[float(v) for v in values],
            trajectories=int(d["trajectories"]),
            output_dir=Path(out),
            seed=int(d["seed"]),
            method=d["method"],
            cond=int(d["cond"]),
            repeats=int(d.get("repeats", 1)),
            model_kind=model.get("kind", "analytic"),
            model_path=model.get("path"),
            raw=d,
        )

    @classmethod
    def load(cls, path, env: Optional[dict] = None) -> "RunConfig":
        return cls.from_dict(read_config_dict(path), env=env)


def read_config_dict(path) -> dict:
    """Parse a YAML config file into a plain mapping (no defaults applied)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def reference_config(**overrides) -> RunConfig:
    """The canonical desk-scale setup, with optional top-level/nested overrides."""
    return RunConfig.from_dict(overrides, env={})
