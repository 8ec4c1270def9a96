"""Invariant suite behind ``zigzag-lab verify``: exact identities and universal inequalities."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .analysis import accumulation_inequality, decompose_gains, relative_error, theorem3_closed_form
from .config import reference_config
from .sampler import (
    ddim_denoise_step, ddim_invert_step, end2end_inject, initial_latents,
    standard_sample, trajectory_rngs, zigzag_sample,
)
from .schedule import build_schedule
from .score import AnalyticMixtureModel, ConstantEpsilonModel, CountingModel, MixtureSpec, analytic_epsilon, log_density


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _reference(n: int, seed: int = 0, **sampler):
    cfg = reference_config(seed=seed, trajectories=n)
    sched = cfg.build_schedule()
    model = AnalyticMixtureModel(cfg.mixture, sched)
    scfg = cfg.sampler.with_(**sampler)
    return cfg, sched, model, scfg


def _fresh(seed, n, dim):
    rngs = trajectory_rngs(seed, n)
    return rngs, initial_latents(rngs, dim)


def check_round_trip(samples: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        T = int(rng.integers(1, 60))
        lo = float(rng.uniform(1e-5, 0.05))
        hi = float(rng.uniform(lo, 0.6))
        sched = build_schedule(str(rng.choice(["linear", "cosine"])), T, lo, hi)
        t = int(rng.integers(1, T + 1))
        x = rng.normal(size=int(rng.integers(1, 6))) * rng.uniform(0.1, 5)
        eps = rng.normal(size=x.shape) * rng.uniform(0.1, 5)
        back = ddim_invert_step(ddim_denoise_step(x, t, eps, sched), t, eps, sched)
        worst = max(worst, float(np.linalg.norm(back - x) / np.linalg.norm(x)))
    return CheckResult("round-trip invert(denoise(x, eps), eps) == x", worst <= 1e-10,
                       f"{samples} tuples, max rel err {worst:.2e} (tol 1e-10)")


def check_step_identity(n: int = 64) -> CheckResult:
    cfg, sched, model, scfg = _reference(n)
    rngs, x_T = _fresh(cfg.seed, n, cfg.mixture.dim)
    _, rec = zigzag_sample(model, cfg.cond, scfg, x_T, sched, rngs=rngs)
    err = float(decompose_gains(rec, sched).identity_rel_err.max())
    return CheckResult("step-by-step identity sum ||x_t - x~_t||^2", err <= 1e-8,
                       f"{n} trajectories, max rel err {err:.2e} (tol 1e-8)")


def check_end_to_end_identity(n: int = 64) -> CheckResult:
    cfg, sched, model, scfg = _reference(n)
    rngs, x_T = _fresh(cfg.seed, n, cfg.mixture.dim)
    _, rec = end2end_inject(model, cfg.cond, scfg, x_T, sched, rngs=rngs)
    g = decompose_gains(rec, sched)
    direct = np.sum((rec.x_T - rec.blocks[0].x_inverted) ** 2, axis=-1)
    err = float(relative_error(direct, g.delta_end2end).max())
    return CheckResult("end-to-end identity ||x_T - x~_T||^2", err <= 1e-8,
                       f"{n} trajectories, max rel err {err:.2e} (tol 1e-8)")


def _constant_model():
    return ConstantEpsilonModel([0.7, -0.3], [0.2, 0.4])


def check_gap_closed_form(n: int = 16) -> CheckResult:
    cfg, sched, _, scfg = _reference(n)
    model = _constant_model()
    rngs, x_T = _fresh(cfg.seed, n, 2)
    _, rec = zigzag_sample(model, 0, scfg, x_T, sched, rngs=rngs)
    g = decompose_gains(rec, sched)
    err = float(relative_error(g.measured, theorem3_closed_form(rec, sched, scfg.gamma1, scfg.gamma2)).max())
    gap = scfg.gamma1 - scfg.gamma2
    d1 = theorem3_closed_form(rec, sched, scfg.gamma2 + gap, scfg.gamma2)
    d2 = theorem3_closed_form(rec, sched, scfg.gamma2 + 2 * gap, scfg.gamma2)
    ratio_err = float(np.max(np.abs(d2 / d1 - 4.0)))
    tau2 = float(np.max(np.abs(g.tau2)))
    ok = err <= 1e-10 and ratio_err <= 1e-9 and tau2 == 0.0
    return CheckResult("guidance-gap closed form (constant predictor)", ok,
                       f"rel err {err:.2e} (tol 1e-10), |ratio-4| {ratio_err:.1e} (tol 1e-9), max|tau2| {tau2:g}")


def check_degeneration(n: int = 32) -> CheckResult:
    cfg, sched, model, scfg = _reference(n)
    rngs, x_T = _fresh(cfg.seed, n, 2)
    a, ra = standard_sample(model, cfg.cond, scfg, x_T, sched, rngs=trajectory_rngs(cfg.seed, n))
    b, rb = zigzag_sample(model, cfg.cond, scfg.with_(lam=0), x_T, sched, rngs=trajectory_rngs(cfg.seed, n))
    same = a.tobytes() == b.tobytes()
    const = _constant_model()
    sc = scfg.with_(gamma2=scfg.gamma1)
    c, _ = standard_sample(const, 0, sc, x_T, sched)
    z, _ = zigzag_sample(const, 0, sc, x_T, sched)
    diff = float(np.max(np.abs(c - z)))
    return CheckResult("degeneration to standard sampling", same and diff <= 1e-10,
                       f"lambda=0 byte-identical: {same}; gamma2=gamma1 constant model max diff {diff:.1e} (tol 1e-10)")


def check_accumulation(n: int = 64) -> CheckResult:
    bad, total = 0, 0
    for seed in range(4):
        for lam, k in ((9, 1), (5, 2), (9, 3)):
            cfg, sched, model, scfg = _reference(n, seed=seed, lam=lam, k=k)
            rngs, x_T = _fresh(seed, n, 2)
            _, rec = zigzag_sample(model, cfg.cond, scfg, x_T, sched, rngs=rngs)
            rep = accumulation_inequality(rec, sched)
            bad += int(np.sum(~rep.holds))
            total += n
    return CheckResult("accumulation inequality J*sum s^2 >= (sum s)^2", bad == 0,
                       f"{total} trajectories, {bad} violations")


def check_score_oracle(probes: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    sched = build_schedule("linear", 10, 1e-4, 0.02)
    spec = MixtureSpec.uniform([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.5]], 0.5)
    worst, h = 0.0, 1e-5
    for _ in range(probes):
        x = rng.normal(size=2) * 2.5
        t = int(rng.integers(1, 11))
        cond = [None, 0, 1, 2][int(rng.integers(0, 4))]
        grad = np.empty(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            grad[i] = (log_density(spec, sched, x + e, t, cond) - log_density(spec, sched, x - e, t, cond)) / (2 * h)
        fd = -np.sqrt(1 - sched.alpha_bars[t]) * grad
        eps = analytic_epsilon(spec, sched, x, t, cond)
        worst = max(worst, float(np.linalg.norm(fd - eps) / np.linalg.norm(eps)))
    return CheckResult("analytic epsilon vs finite-difference score", worst <= 1e-5,
                       f"{probes} probes, max rel err {worst:.2e} (tol 1e-5)")


def check_call_counts() -> CheckResult:
    cfg, sched, model, scfg = _reference(8)
    rngs, x_T = _fresh(cfg.seed, 8, 2)
    results = []
    for lam in range(cfg.sampler.T):
        counter = CountingModel(model)
        zigzag_sample(counter, cfg.cond, scfg.with_(lam=lam), x_T, sched)
        results.append(counter.pair_calls == scfg.T + 2 * lam)
    counter = CountingModel(model)
    standard_sample(counter, cfg.cond, scfg, x_T, sched)
    ok = all(results) and counter.pair_calls == scfg.T
    return CheckResult("model-call accounting T and T + 2*lambda", ok,
                       f"standard {counter.pair_calls} calls, zigzag lambda=0..{scfg.T - 1} ok: {all(results)}")


CHECKS: List[Callable[[], CheckResult]] = [
    check_round_trip,
    check_step_identity,
    check_end_to_end_identity,
    check_gap_closed_form,
    check_degeneration,
    check_accumulation,
    check_score_oracle,
    check_call_counts,
]


def run_all() -> List[CheckResult]:
    out = []
    for check in CHECKS:
        start = time.perf_counter()
        try:
            res = check()
        except Exception as exc:  # a crashing check is a failed check
            res = CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        out.append(res)
    return out
