"""DDIM denoising/inversion steps and the sampling loops built from them.

All loops work on a batch of latents of shape (n, d), one row per trajectory.
Row i draws its randomness from its own generator keyed by ``(seed, i)``,
so a trajectory's output does not depend on which batch it ran in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Sequence

import numpy as np

from .schedule import NoiseSchedule, check_step
from .score import ScorePair, cfg_epsilon, check_condition


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 10
    gamma1: float = 5.5
    gamma2: float = 0.0
    lam: int = 0  # zigzag steps; spelled ``lambda`` in config files and on the CLI
    k: int = 1
    eta: float = 0.0
    s: float = 0.0
    seed: int = 0
    exact_inversion: bool = False
    fp_max_iter: int = 50
    fp_tol: float = 1e-10

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 <= self.lam <= self.T - 1:
            raise ValueError(f"lambda must satisfy 0 <= lambda <= T-1, got {self.lam} with T={self.T}")
        if not 1 <= self.k <= self.T:
            raise ValueError(f"k must satisfy 1 <= k <= T, got {self.k}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.s < 0:
            raise ValueError("s must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        for name in ("gamma1", "gamma2", "eta", "s"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def deterministic(self) -> bool:
        return self.eta == 0.0 and self.s == 0.0

    def with_(self, **changes) -> "SamplerConfig":
        return replace(self, **changes)


@dataclass
class StepEntry:
    """One denoising step x_t -> x_{t-1} for every trajectory in the batch."""

    t: int
    gamma: float
    x: np.ndarray
    x_next: np.ndarray
    u_cond: np.ndarray
    u_uncond: np.ndarray
    eps: np.ndarray


@dataclass
class InversionEntry:
    """One inversion step x~_{t-1} -> x~_t.

    ``eval_x`` is where the predictor was queried: the input latent for the
    approximate inversion, the last fixed-point iterate in exact mode.
    ``eps`` is what was actually applied, including any injected error.
    """

    t: int
    gamma: float
    x_prev: np.ndarray
    x: np.ndarray
    eval_x: np.ndarray
    u_cond: np.ndarray
    u_uncond: np.ndarray
    eps: np.ndarray
    iterations: int = 1


@dataclass
class ZigzagBlock:
    """Denoise ``size`` steps from x_t, invert them back to x~_t, then continue from x~_t."""

    t: int
    size: int
    x_start: np.ndarray
    x_inverted: np.ndarray
    forward: List[StepEntry]
    inversion: List[InversionEntry]  # in application order: t - size + 1 .. t


@dataclass
class TrajectoryRecord:
    method: str
    cond: int
    config: SamplerConfig
    x_T: np.ndarray
    x_0: np.ndarray
    steps: List[StepEntry] = field(default_factory=list)  # final path, t = T..1
    blocks: List[ZigzagBlock] = field(default_factory=list)
    discarded: List[StepEntry] = field(default_factory=list)  # resampling's superseded steps

    @property
    def zigzag_steps(self) -> List[int]:
        return [b.t for b in self.blocks]

    @property
    def num_inversions(self) -> int:
        return sum(len(b.inversion) for b in self.blocks)

    def latents(self) -> dict:
        """Just the latents on the final sampling path, for byte-level comparisons."""
        return {
            "x_T": self.x_T.tolist(),
            "path": [{"t": e.t, "x": e.x.tolist(), "x_next": e.x_next.tolist()} for e in self.steps],
            "x_0": self.x_0.tolist(),
        }

    def to_dict(self) -> dict:
        arr = lambda a: np.asarray(a).tolist()
        step = lambda e: {
            "t": e.t, "gamma": e.gamma, "x": arr(e.x), "x_next": arr(e.x_next),
            "u_cond": arr(e.u_cond), "u_uncond": arr(e.u_uncond), "eps": arr(e.eps),
        }
        inv = lambda e: {
            "t": e.t, "gamma": e.gamma, "x_prev": arr(e.x_prev), "x": arr(e.x), "eval_x": arr(e.eval_x),
            "u_cond": arr(e.u_cond), "u_uncond": arr(e.u_uncond), "eps": arr(e.eps),
            "iterations": e.iterations,
        }
        return {
            "method": self.method,
            "cond": self.cond,
            "config": {**self.config.__dict__},
            "x_T": arr(self.x_T),
            "x_0": arr(self.x_0),
            "steps": [step(e) for e in self.steps],
            "blocks": [
                {
                    "t": b.t, "size": b.size, "x_start": arr(b.x_start), "x_inverted": arr(b.x_inverted),
                    "forward": [step(e) for e in b.forward], "inversion": [inv(e) for e in b.inversion],
                }
                for b in self.blocks
            ],
            "discarded": [step(e) for e in self.discarded],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        A = lambda v: np.asarray(v, dtype=np.float64)

        def step(e):
            return StepEntry(e["t"], e["gamma"], A(e["x"]), A(e["x_next"]), A(e["u_cond"]),
                             A(e["u_uncond"]), A(e["eps"]))

        def inv(e):
            return InversionEntry(e["t"], e["gamma"], A(e["x_prev"]), A(e["x"]), A(e["eval_x"]),
                                  A(e["u_cond"]), A(e["u_uncond"]), A(e["eps"]), e["iterations"])

        blocks = [
            ZigzagBlock(b["t"], b["size"], A(b["x_start"]), A(b["x_inverted"]),
                        [step(e) for e in b["forward"]], [inv(e) for e in b["inversion"]])
            for b in d["blocks"]
        ]
        return cls(
            method=d["method"], cond=d["cond"], config=SamplerConfig(**d["config"]),
            x_T=A(d["x_T"]), x_0=A(d["x_0"]), steps=[step(e) for e in d["steps"]],
            blocks=blocks, discarded=[step(e) for e in d.get("discarded", [])],
        )


# -- single steps -----------------------------------------------------------


def ddim_sigma(sched: NoiseSchedule, t: int, eta: float) -> float:
    """Standard DDIM-eta noise scale for the step t -> t-1."""
    a, ap = sched.alpha_bars[t], sched.alpha_bars[t - 1]
    if eta == 0.0 or a == ap:
        return 0.0
    return float(eta * np.sqrt((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)))


def ddim_denoise_step(x_t, t: int, eps, sched: NoiseSchedule, eta: float = 0.0, noise=None):
    """x_{t-1} from x_t given the noise prediction ``eps``.

    With eta > 0 the direction term sqrt(1 - abar_{t-1}) eps is split into a
    deterministic part and ``sigma * noise``; ``noise`` must then be supplied.
    """
    if t < 1:
        raise ValueError("cannot denoise below t = 0")
    check_step(sched, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x_t.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent shape {x_t.shape}")
    a, ap = sched.alpha_bars[t], sched.alpha_bars[t - 1]
    if a == ap:
        return x_t.copy()  # zero-length step; the rounding of the general form would leak in
    x0_hat = (x_t - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
    sigma = ddim_sigma(sched, t, eta)
    if sigma == 0.0:
        return np.sqrt(ap) * x0_hat + np.sqrt(1.0 - ap) * eps
    if noise is None:
        raise ValueError("eta > 0 requires a noise sample")
    return np.sqrt(ap) * x0_hat + np.sqrt(1.0 - ap - sigma**2) * eps + sigma * noise


def ddim_invert_step(x_prev, t: int, eps, sched: NoiseSchedule):
    """x~_t = m_t x~_{t-1} + n_t eps."""
    check_step(sched, t)
    c = sched.coefficients
    return c.m[t] * np.asarray(x_prev, dtype=np.float64) + c.n[t] * np.asarray(eps, dtype=np.float64)


# -- loops -------------------------------------------------------------------


def trajectory_seed(seed: int, index: int) -> np.random.SeedSequence:
    # XOR-ing the index into the seed would make master seeds < n permute one shared set
    return np.random.SeedSequence([seed, index])


def trajectory_rngs(seed: int, n: int, start: int = 0) -> List[np.random.Generator]:
    return [np.random.default_rng(trajectory_seed(seed, i)) for i in range(start, start + n)]


def initial_latents(rngs: Sequence[np.random.Generator], dim: int) -> np.ndarray:
    """x_T ~ N(0, I), one row per trajectory generator."""
    return np.stack([r.standard_normal(dim) for r in rngs])


class _Runner:
    def __init__(self, model, cond, cfg: SamplerConfig, sched: NoiseSchedule, n: int, rngs):
        if sched.num_steps != cfg.T:
            raise ValueError(f"schedule has {sched.num_steps} steps but config asks for T={cfg.T}")
        check_condition(cond, model.num_classes, allow_null=False)
        self.model = model
        self.cond = int(cond)
        self.cfg = cfg
        self.sched = sched
        self.rngs = list(rngs) if rngs is not None else trajectory_rngs(cfg.seed, n)
        if len(self.rngs) != n:
            raise ValueError(f"need one generator per trajectory ({n}), got {len(self.rngs)}")

    def normal(self, shape) -> np.ndarray:
        return np.stack([r.standard_normal(shape[1:]) for r in self.rngs])

    def pair(self, x, t) -> ScorePair:
        p = self.model.pair(x, t, self.cond)
        return ScorePair(np.asarray(p.u_cond, dtype=np.float64), np.asarray(p.u_uncond, dtype=np.float64))

    def denoise(self, x, t, gamma) -> StepEntry:
        p = self.pair(x, t)
        eps = cfg_epsilon(p, gamma)
        noise = self.normal(x.shape) if ddim_sigma(self.sched, t, self.cfg.eta) > 0 else None
        x_next = ddim_denoise_step(x, t, eps, self.sched, self.cfg.eta, noise)
        return StepEntry(t, gamma, x, x_next, p.u_cond, p.u_uncond, eps)

    def invert(self, x_prev, t, gamma, eps_denoise) -> InversionEntry:
        cfg = self.cfg
        eval_x = x_prev
        p = self.pair(eval_x, t)
        eps = cfg_epsilon(p, gamma)
        x = ddim_invert_step(x_prev, t, eps, self.sched)
        iterations = 1
        if cfg.exact_inversion:
            for _ in range(cfg.fp_max_iter):
                eval_x = x
                p = self.pair(eval_x, t)
                eps = cfg_epsilon(p, gamma)
                x_new = ddim_invert_step(x_prev, t, eps, self.sched)
                iterations += 1
                done = np.max(np.abs(x_new - x)) <= cfg.fp_tol
                x = x_new
                if done:
                    break
        if cfg.s > 0:
            g = self.normal(x_prev.shape)
            scale = cfg.s * np.linalg.norm(eps_denoise, axis=-1, keepdims=True) / np.linalg.norm(g, axis=-1, keepdims=True)
            eps = eps + scale * g
            x = ddim_invert_step(x_prev, t, eps, self.sched)
        return InversionEntry(t, gamma, x_prev, x, eval_x, p.u_cond, p.u_uncond, eps, iterations)

    def block(self, x_t, t, size) -> ZigzagBlock:
        cfg = self.cfg
        forward, y = [], x_t
        for j in range(size):
            e = self.denoise(y, t - j, cfg.gamma1)
            forward.append(e)
            y = e.x_next
        inversion = []
        for e in reversed(forward):
            ie = self.invert(y, e.t, cfg.gamma2, e.eps)
            inversion.append(ie)
            y = ie.x
        return ZigzagBlock(t, size, x_t, y, forward, inversion)


def _prepare(x_T, model):
    x = np.asarray(x_T, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"x_T must have shape (d,) or (n, d) with d={model.dim}, got {np.shape(x_T)}")
    return x, single


def _finish(x, single):
    return x[0] if single else x


def standard_sample(model, cond, cfg: SamplerConfig, x_T, sched: NoiseSchedule, rngs=None):
    """Plain guided DDIM: T denoising steps at gamma1. Returns ``(x_0, record)``."""
    x, single = _prepare(x_T, model)
    run = _Runner(model, cond, cfg, sched, x.shape[0], rngs)
    rec = TrajectoryRecord("standard", run.cond, cfg, x.copy(), x)
    for t in range(cfg.T, 0, -1):
        e = run.denoise(x, t, cfg.gamma1)
        rec.steps.append(e)
        x = e.x_next
    rec.x_0 = x
    return _finish(x, single), rec


def zigzag_sample(model, cond, cfg: SamplerConfig, x_T, sched: NoiseSchedule, rngs=None):
    """Z-Sampling: zigzag self-reflection at every step t with t > T - lambda.

    With k = 1 each zigzag is denoise(gamma1) -> invert(gamma2) -> denoise(gamma1)
    at a single step. With k > 1 the sampler denoises k steps, inverts the same k
    steps back to x~_t and re-denoises them, then continues at t - k.
    """
    x, single = _prepare(x_T, model)
    run = _Runner(model, cond, cfg, sched, x.shape[0], rngs)
    rec = TrajectoryRecord("zigzag", run.cond, cfg, x.copy(), x)
    t = cfg.T
    while t >= 1:
        if t > cfg.T - cfg.lam:
            size = min(cfg.k, t)
            b = run.block(x, t, size)
            rec.blocks.append(b)
            x = b.x_inverted
            for j in range(size):
                e = run.denoise(x, t - j, cfg.gamma1)
                rec.steps.append(e)
                x = e.x_next
            t -= size
        else:
            e = run.denoise(x, t, cfg.gamma1)
            rec.steps.append(e)
            x = e.x_next
            t -= 1
    rec.x_0 = x
    return _finish(x, single), rec


def end2end_inject(model, cond, cfg: SamplerConfig, x_T, sched: NoiseSchedule, rngs=None):
    """Full denoise at gamma1, full inversion at gamma2, full denoise again at gamma1.

    Recorded as a single zigzag block of size T; ``blocks[0].x_inverted`` is x~_T.
    """
    x, single = _prepare(x_T, model)
    run = _Runner(model, cond, cfg, sched, x.shape[0], rngs)
    rec = TrajectoryRecord("end2end", run.cond, cfg, x.copy(), x)
    b = run.block(x, cfg.T, cfg.T)
    rec.blocks.append(b)
    x = b.x_inverted
    for t in range(cfg.T, 0, -1):
        e = run.denoise(x, t, cfg.gamma1)
        rec.steps.append(e)
        x = e.x_next
    rec.x_0 = x
    return _finish(x, single), rec


def resample_baseline(model, cond, cfg: SamplerConfig, x_T, sched: NoiseSchedule, repeats: int = 1, rngs=None):
    """Resampling: at each of the first lambda steps, re-noise x_{t-1} back to level t
    with q(x_t | x_{t-1}) and denoise again, ``repeats`` times."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    x, single = _prepare(x_T, model)
    run = _Runner(model, cond, cfg, sched, x.shape[0], rngs)
    rec = TrajectoryRecord("resample", run.cond, cfg, x.copy(), x)
    for t in range(cfg.T, 0, -1):
        e = run.denoise(x, t, cfg.gamma1)
        if t > cfg.T - cfg.lam:
            beta = sched.step_beta(t)
            for _ in range(repeats):
                rec.discarded.append(e)
                x_re = np.sqrt(1.0 - beta) * e.x_next + np.sqrt(beta) * run.normal(x.shape)
                e = run.denoise(x_re, t, cfg.gamma1)
        rec.steps.append(e)
        x = e.x_next
    rec.x_0 = x
    return _finish(x, single), rec


SAMPLERS = {
    "standard": standard_sample,
    "zigzag": zigzag_sample,
    "end2end": end2end_inject,
    "resample": resample_baseline,
}
