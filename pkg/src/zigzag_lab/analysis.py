"""Latent-difference decomposition of zigzag trajectories and sample-quality metrics.

For a zigzag block that starts at x_t, denoises steps j = t..t-k+1 with
eps1_j and inverts them back with eps2_j, deterministic DDIM gives exactly

    x_t - x~_t = sqrt(abar_t) * sum_j h_j (eps1_j - eps2_j).

The per-step difference is split into
    tau1_j = eps1_j - eps_{gamma2}(x_j)   (guidance-gap term, equals dgamma (u_c - u_null)(x_j))
    tau2_j = eps_{gamma2}(x_j) - eps2_j   (inversion approximation error)
so that k = 1 yields the step-by-step sum and k = T the end-to-end difference.
All squared quantities are squared Euclidean norms over the latent axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .schedule import NoiseSchedule
from .score import MixtureSpec, cfg_epsilon, ScorePair
from .sampler import TrajectoryRecord

_ZIGZAG_METHODS = ("zigzag", "end2end")


def _sqnorm(v):
    return np.sum(np.asarray(v) ** 2, axis=-1)


def relative_error(a, b, floor: float = 1e-300):
    """|a - b| / max(|a|, |b|), and 0 where both are below ``floor``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale > floor, np.abs(a - b) / np.where(scale > floor, scale, 1.0), 0.0)


@dataclass
class GainDecomposition:
    steps: np.ndarray  # (J,) step index of each recorded term
    tau1: np.ndarray  # (J, n, d)
    tau2: np.ndarray  # (J, n, d)
    delta_zigzag: np.ndarray  # (n,) blockwise sum, the step-by-step formula when k = 1
    delta_end2end: np.ndarray  # (n,) abar_T ||sum_j h_j (tau1 + tau2)||^2
    delta_theorem3: np.ndarray  # (n,) sum_j abar_j h_j^2 ||tau1_j||^2
    measured: np.ndarray  # (n,) sum over blocks of ||x_t - x~_t||^2 from raw latents
    sum_sq_tau1: np.ndarray  # (n,) unweighted sum_j ||tau1_j||^2
    sq_sum_tau1: np.ndarray  # (n,) unweighted ||sum_j tau1_j||^2

    @property
    def identity_rel_err(self) -> np.ndarray:
        return relative_error(self.measured, self.delta_zigzag)

    def summary(self) -> dict:
        return {
            "delta_zigzag": float(np.mean(self.delta_zigzag)),
            "delta_end2end": float(np.mean(self.delta_end2end)),
            "delta_theorem3": float(np.mean(self.delta_theorem3)),
            "measured": float(np.mean(self.measured)),
            "identity_rel_err": float(np.max(self.identity_rel_err, initial=0.0)),
        }


def _require_zigzag(traj: TrajectoryRecord):
    if traj.method not in _ZIGZAG_METHODS:
        raise ValueError(f"{traj.method!r} trajectory has no zigzag instrumentation")


def decompose_gains(traj: TrajectoryRecord, sched: NoiseSchedule, cfg=None) -> GainDecomposition:
    _require_zigzag(traj)
    cfg = cfg or traj.config
    ab, h = sched.alpha_bars, sched.coefficients.h
    n, d = traj.x_T.shape
    steps, tau1, tau2 = [], [], []
    delta_zz = np.zeros(n)
    measured = np.zeros(n)
    for b in traj.blocks:
        inv = {e.t: e for e in b.inversion}
        acc = np.zeros((n, d))
        for e in b.forward:
            weak = cfg_epsilon(ScorePair(e.u_cond, e.u_uncond), cfg.gamma2)
            t1 = e.eps - weak
            t2 = weak - inv[e.t].eps
            steps.append(e.t)
            tau1.append(t1)
            tau2.append(t2)
            acc += h[e.t] * (t1 + t2)
        delta_zz += ab[b.t] * _sqnorm(acc)
        measured += _sqnorm(b.x_start - b.x_inverted)
    steps = np.asarray(steps, dtype=int)
    tau1 = np.asarray(tau1).reshape(len(steps), n, d)
    tau2 = np.asarray(tau2).reshape(len(steps), n, d)
    hs = h[steps][:, None, None] if len(steps) else np.zeros((0, 1, 1))
    weights = (ab[steps] * h[steps] ** 2)[:, None] if len(steps) else np.zeros((0, 1))
    return GainDecomposition(
        steps=steps,
        tau1=tau1,
        tau2=tau2,
        delta_zigzag=delta_zz,
        delta_end2end=ab[sched.num_steps] * _sqnorm(np.sum(hs * (tau1 + tau2), axis=0)) if len(steps) else np.zeros(n),
        delta_theorem3=np.sum(weights * _sqnorm(tau1), axis=0) if len(steps) else np.zeros(n),
        measured=measured,
        sum_sq_tau1=np.sum(_sqnorm(tau1), axis=0) if len(steps) else np.zeros(n),
        sq_sum_tau1=_sqnorm(np.sum(tau1, axis=0)) if len(steps) else np.zeros(n),
    )


def theorem3_closed_form(traj: TrajectoryRecord, sched: NoiseSchedule, gamma1: float, gamma2: float):
    """sum_t abar_t h_t^2 ||(gamma1 - gamma2)(u_cond(x_t) - u_uncond(x_t))||^2 per trajectory."""
    _require_zigzag(traj)
    ab, h = sched.alpha_bars, sched.coefficients.h
    gap = gamma1 - gamma2
    total = np.zeros(traj.x_T.shape[0])
    for b in traj.blocks:
        for e in b.forward:
            if e.u_cond is None or e.u_uncond is None:
                raise ValueError(f"step {e.t} lacks guidance-branch recordings")
            total += ab[e.t] * h[e.t] ** 2 * _sqnorm(gap * (e.u_cond - e.u_uncond))
    return total


@dataclass
class AccumulationReport:
    s: np.ndarray  # (J, n) h_j ||tau1_j||
    lhs: np.ndarray  # (n,) J * sum_j s_j^2
    rhs: np.ndarray  # (n,) (sum_j s_j)^2
    holds: np.ndarray  # (n,) bool
    delta_zigzag: np.ndarray
    delta_end2end: np.ndarray
    sum_sq_tau1: np.ndarray
    sq_sum_tau1: np.ndarray

    @property
    def all_hold(self) -> bool:
        return bool(np.all(self.holds))


def accumulation_inequality(traj: TrajectoryRecord, sched: NoiseSchedule, gains: GainDecomposition | None = None):
    """Check J * sum s_j^2 >= (sum s_j)^2 with s_j = h_j ||tau1_j|| over the J recorded terms.

    The step-by-step vs end-to-end deltas are reported alongside, without an
    asserted ordering. The comparison allows only floating-point rounding slack.
    """
    g = gains if gains is not None else decompose_gains(traj, sched)
    h = sched.coefficients.h
    J = len(g.steps)
    n = traj.x_T.shape[0]
    if J == 0:
        s = np.zeros((0, n))
        lhs = rhs = np.zeros(n)
    else:
        s = h[g.steps][:, None] * np.sqrt(_sqnorm(g.tau1))
        lhs = np.array([J * math.fsum(col) for col in (s**2).T])
        rhs = np.array([math.fsum(col) ** 2 for col in s.T])
    slack = 8 * max(J, 1) * np.finfo(float).eps * np.abs(lhs)
    return AccumulationReport(s, lhs, rhs, lhs + slack >= rhs, g.delta_zigzag, g.delta_end2end,
                              g.sum_sq_tau1, g.sq_sum_tau1)


# -- sample quality ------------------------------------------------------------


def nearest_component(samples, spec: MixtureSpec) -> np.ndarray:
    d2 = cdist(np.atleast_2d(samples), spec.means, "sqeuclidean")
    return np.argmin(d2, axis=1)


def energy_distance(x, y) -> float:
    """V-statistic energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| (non-negative)."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return float(max(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean(), 0.0))


def energy_distance_jackknife(x, y):
    """Energy distance and its delete-one jackknife standard error over the rows of ``x``."""
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    n, m = len(x), len(y)
    dxy, dxx = cdist(x, y), cdist(x, x)
    s_xy, s_xx, yy = dxy.sum(), dxx.sum(), cdist(y, y).mean()
    ed = 2 * s_xy / (n * m) - s_xx / n**2 - yy
    if n < 2:
        return max(ed, 0.0), float("nan")
    loo = 2 * (s_xy - dxy.sum(1)) / ((n - 1) * m) - (s_xx - 2 * dxx.sum(1)) / (n - 1) ** 2 - yy
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(max(ed, 0.0)), float(se)


@dataclass
class QualityReport:
    alignment: float
    mean_shift: float
    energy_distance: float
    alignment_se: float = float("nan")
    mean_shift_se: float = float("nan")
    energy_distance_se: float = float("nan")


def quality_report(samples, spec: MixtureSpec, cond: int, ref_seed: int) -> QualityReport:
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = samples.shape[0]
    if n == 0 or samples.size == 0:
        raise ValueError("quality_report needs at least one sample")
    aligned = nearest_component(samples, spec) == cond
    p = float(aligned.mean())
    target = spec.means[cond]
    mean = samples.mean(axis=0)
    shift = float(np.linalg.norm(mean - target))
    if n > 1:
        loo_means = (samples.sum(axis=0) - samples) / (n - 1)
        loo = np.linalg.norm(loo_means - target, axis=1)
        shift_se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    else:
        shift_se = float("nan")
    ref, _ = spec.sample(n, np.random.default_rng(ref_seed), cond)
    ed, ed_se = energy_distance_jackknife(samples, ref)
    return QualityReport(
        alignment=p,
        mean_shift=shift,
        energy_distance=ed,
        alignment_se=math.sqrt(p * (1 - p) / n),
        mean_shift_se=shift_se,
        energy_distance_se=ed_se,
    )
