"""Sweep runner: one row of aggregated metrics per value of the sweep axis."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .analysis import (
    accumulation_inequality,
    decompose_gains,
    nearest_component,
    quality_report,
)
from .config import RunConfig
from .sampler import SAMPLERS, SamplerConfig, initial_latents, trajectory_rngs
from .score import AnalyticMixtureModel, CountingModel

log = logging.getLogger(__name__)

IDENTITY_RTOL = 1e-8

RESULT_FIELDS = [
    "alignment", "alignment_se",
    "baseline_alignment", "baseline_alignment_se",
    "gain", "gain_se",
    "mean_shift", "mean_shift_se",
    "energy_distance", "energy_distance_se",
    "delta_zigzag", "delta_zigzag_se",
    "delta_end2end", "delta_end2end_se",
    "delta_theorem3", "delta_theorem3_se",
    "measured", "measured_se",
    "identity_rel_err",
    "inequality_holds",
    "model_calls",
]


class IdentityCheckFailed(RuntimeError):
    pass


def csv_header(axis: str) -> List[str]:
    return [axis] + RESULT_FIELDS


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def mean_se(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def non_decreasing(means, ses, n_se: float = 2.0) -> bool:
    """True unless some adjacent pair drops by more than ``n_se`` standard errors of the difference."""
    for a, b, sa, sb in zip(means, means[1:], ses, ses[1:]):
        if a - b > n_se * math.hypot(sa, sb):
            return False
    return True


def load_model(cfg: RunConfig, sched):
    if cfg.model_kind == "analytic":
        return AnalyticMixtureModel(cfg.mixture, sched)
    from .scorenet import NetScoreModel

    path = Path(cfg.model_path)
    model = NetScoreModel.load(path)
    if model.sched.num_steps != sched.num_steps or not np.array_equal(model.sched.alpha_bars, sched.alpha_bars):
        raise ValueError(f"checkpoint {path} was trained on a different schedule than the run config")
    return model


def sweep_sampler_config(base: SamplerConfig, axis: str, value: float) -> SamplerConfig:
    if axis == "gap":
        return base.with_(gamma2=base.gamma1 - value)
    if axis == "lambda":
        return base.with_(lam=int(round(value)))
    if axis == "k":
        return base.with_(k=int(round(value)))
    if axis == "s":
        return base.with_(s=float(value))
    if axis == "eta":
        return base.with_(eta=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class SweepPoint:
    value: float
    config: SamplerConfig
    samples: np.ndarray
    baseline: np.ndarray
    aligned: np.ndarray
    baseline_aligned: np.ndarray
    row: Dict[str, float]
    seconds_per_trajectory: float


@dataclass
class ExperimentResult:
    config: RunConfig
    points: List[SweepPoint] = field(default_factory=list)
    csv_path: Path | None = None
    summary_path: Path | None = None

    @property
    def rows(self) -> List[Dict[str, float]]:
        return [p.row for p in self.points]

    def column(self, name: str) -> List[float]:
        return [p.row[name] for p in self.points]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_header(self.config.sweep_axis))
        for p in self.points:
            w.writerow([fmt(p.value)] + [fmt(p.row[f]) for f in RESULT_FIELDS])
        return buf.getvalue()

    def summary(self) -> dict:
        c = self.config
        return {
            "experiment": c.experiment,
            "method": c.method,
            "sweep_axis": c.sweep_axis,
            "trajectories": c.trajectories,
            "seed": c.seed,
            "config": c.raw,
            "rows": [{c.sweep_axis: p.value, **p.row} for p in self.points],
            "seconds_per_trajectory": {fmt(p.value): p.seconds_per_trajectory for p in self.points},
            "csv": str(self.csv_path) if self.csv_path else None,
        }


def _run_one(sampler, model, cfg: RunConfig, scfg: SamplerConfig, sched):
    rngs = trajectory_rngs(cfg.seed, cfg.trajectories)
    x_T = initial_latents(rngs, cfg.mixture.dim)
    kwargs = {"repeats": cfg.repeats} if sampler is SAMPLERS["resample"] else {}
    return sampler(model, cfg.cond, scfg, x_T, sched, rngs=rngs, **kwargs)


def run_point(cfg: RunConfig, model, sched, value: float) -> SweepPoint:
    scfg = sweep_sampler_config(cfg.sampler, cfg.sweep_axis, value)
    counter = CountingModel(model)
    start = time.perf_counter()
    x0, rec = _run_one(SAMPLERS[cfg.method], counter, cfg, scfg, sched)
    elapsed = time.perf_counter() - start
    base0, _ = _run_one(SAMPLERS["standard"], model, cfg, scfg, sched)

    q = quality_report(x0, cfg.mixture, cfg.cond, cfg.ref_seed)
    aligned = (nearest_component(x0, cfg.mixture) == cfg.cond).astype(float)
    base_aligned = (nearest_component(base0, cfg.mixture) == cfg.cond).astype(float)
    b_mean, b_se = mean_se(base_aligned)
    g_mean, g_se = mean_se(aligned - base_aligned)
    row = {
        "alignment": q.alignment, "alignment_se": q.alignment_se,
        "baseline_alignment": b_mean, "baseline_alignment_se": b_se,
        "gain": g_mean, "gain_se": g_se,
        "mean_shift": q.mean_shift, "mean_shift_se": q.mean_shift_se,
        "energy_distance": q.energy_distance, "energy_distance_se": q.energy_distance_se,
    }
    if rec.method in ("zigzag", "end2end"):
        gains = decompose_gains(rec, sched)
        for name in ("delta_zigzag", "delta_end2end", "delta_theorem3", "measured"):
            row[name], row[name + "_se"] = mean_se(getattr(gains, name))
        rel = float(np.max(gains.identity_rel_err, initial=0.0))
        row["identity_rel_err"] = rel
        if scfg.eta == 0.0 and rel > IDENTITY_RTOL:
            worst = int(np.argmax(gains.identity_rel_err))
            raise IdentityCheckFailed(
                f"{cfg.sweep_axis}={value}: latent-difference identity off by {rel:.3e} "
                f"(trajectory {worst}: measured={gains.measured[worst]!r}, "
                f"formula={gains.delta_zigzag[worst]!r})"
            )
        acc = accumulation_inequality(rec, sched, gains)
        if not acc.all_hold:
            bad = int(np.argmin(acc.lhs - acc.rhs))
            raise IdentityCheckFailed(
                f"{cfg.sweep_axis}={value}: accumulation inequality violated on trajectory {bad}"
            )
        row["inequality_holds"] = True
    else:
        for name in ("delta_zigzag", "delta_end2end", "delta_theorem3", "measured"):
            row[name], row[name + "_se"] = 0.0, 0.0
        row["identity_rel_err"] = 0.0
        row["inequality_holds"] = True
    row["model_calls"] = counter.pair_calls
    for k, v in row.items():
        if not np.isfinite(float(v)):
            raise FloatingPointError(f"{cfg.sweep_axis}={value}: non-finite {k}")
    return SweepPoint(value, scfg, x0, base0, aligned, base_aligned, row, elapsed / cfg.trajectories)


def run_experiment(cfg: RunConfig, write: bool = True) -> ExperimentResult:
    sched = cfg.build_schedule()
    model = load_model(cfg, sched)
    result = ExperimentResult(cfg)
    for value in cfg.sweep_values:
        point = run_point(cfg, model, sched, value)
        log.info("%s=%s alignment=%.4f ed=%.4f", cfg.sweep_axis, value,
                 point.row["alignment"], point.row["energy_distance"])
        result.points.append(point)
    if write:
        out = Path(cfg.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            result.csv_path = out / "results.csv"
            result.summary_path = out / "summary.json"
            result.csv_path.write_text(result.csv_text())
            result.summary_path.write_text(json.dumps(result.summary(), indent=2, default=str) + "\n")
        except OSError as exc:
            raise OSError(f"failed writing results under {out}: {exc}") from exc
    return result
