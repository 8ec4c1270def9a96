"""Discrete noise schedules and the DDIM coefficient tables derived from them.

Indexing runs t = 1..T for the per-step quantities; ``alpha_bars`` carries an
explicit ``alpha_bars[0] == 1`` so that ``alpha_bars[t]`` and
``alpha_bars[t - 1]`` are always valid lookups for t >= 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class DdimCoefficients:
    """Per-step coefficients, each stored with a leading NaN so that ``h[t]`` is step t.

    h_t = sqrt(1/abar_t - 1) - sqrt(1/abar_{t-1} - 1)
    m_t = sqrt(abar_t / abar_{t-1})
    n_t = sqrt(abar_t) * h_t
    """

    h: np.ndarray
    m: np.ndarray
    n: np.ndarray


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray  # shape (T,), betas[t - 1] is beta_t
    alpha_bars: np.ndarray  # shape (T + 1,), alpha_bars[0] == 1
    num_steps: int
    kind: str = field(default="custom")

    def __post_init__(self):
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    @classmethod
    def from_alpha_bars(cls, alpha_bars, kind: str = "custom") -> "NoiseSchedule":
        """Build a schedule from a cumulative table that starts at 1.

        No monotonicity check is made; this is how degenerate test schedules
        (e.g. two equal consecutive entries) are constructed.
        """
        ab = np.asarray(alpha_bars, dtype=np.float64).copy()
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bars needs at least two entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bars must lie in (0, 1]")
        betas = 1.0 - ab[1:] / ab[:-1]
        return cls(betas=betas, alpha_bars=ab, num_steps=ab.size - 1, kind=kind)

    @property
    def T(self) -> int:
        return self.num_steps

    @cached_property
    def coefficients(self) -> DdimCoefficients:
        return coefficients(self)

    def step_beta(self, t: int) -> float:
        """Variance of the single forward step q(x_t | x_{t-1})."""
        check_step(self, t)
        return float(self.betas[t - 1])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha_bars": self.alpha_bars.tolist()}


def check_step(sched: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"step index {t} outside 1..{sched.num_steps}")


def _cosine_alpha_bars(T: int, offset: float = 0.008) -> np.ndarray:
    f = lambda s: math.cos((s / T + offset) / (1 + offset) * math.pi / 2) ** 2
    return np.array([f(t) / f(0) for t in range(T + 1)])


def build_schedule(
    kind: str = "linear", T: int = 10, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    """Construct a T-step schedule.

    ``linear`` spaces beta_t uniformly from beta_min to beta_max. ``cosine``
    follows the squared-cosine cumulative curve and clips each beta_t into
    [beta_min, beta_max].
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    T = int(T)
    if kind == "linear":
        steps = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    else:
        ab = _cosine_alpha_bars(T)
        steps = np.clip(1.0 - ab[1:] / ab[:-1], beta_min, beta_max)
    betas = np.asarray(steps, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - steps)])
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, num_steps=T, kind=kind)


def coefficients(sched: NoiseSchedule) -> DdimCoefficients:
    ab = sched.alpha_bars
    cur, prev = ab[1:], ab[:-1]
    h = np.sqrt(1.0 / cur - 1.0) - np.sqrt(1.0 / prev - 1.0)
    m = np.sqrt(cur / prev)
    n = np.sqrt(cur) * h
    pad = lambda a: np.concatenate([[np.nan], a])
    out = DdimCoefficients(h=pad(h), m=pad(m), n=pad(n))
    for arr in (out.h, out.m, out.n):
        arr.setflags(write=False)
    return out
