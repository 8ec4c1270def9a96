"""Noise predictors with conditional and unconditional branches.

A condition is a component label ``c`` in ``0..C-1``; ``None`` (exported as
``NULL``) is the null condition. Every model exposes ``epsilon(x, t, cond)``
for one branch and ``pair(x, t, cond)`` for both branches at once. Latents
may carry any number of leading batch axes; the last axis is the data
dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol

import numpy as np

from .schedule import NoiseSchedule, check_step

NULL = None
Condition = Optional[int]


class ScorePair(NamedTuple):
    u_cond: np.ndarray
    u_uncond: np.ndarray


class ScoreModel(Protocol):
    dim: int
    num_classes: int

    def epsilon(self, x: np.ndarray, t: int, cond: Condition) -> np.ndarray: ...

    def pair(self, x: np.ndarray, t: int, cond: int) -> ScorePair: ...


def check_condition(cond: Condition, num_classes: int, allow_null: bool = True) -> None:
    if cond is None:
        if not allow_null:
            raise ValueError("a non-null condition is required here")
        return
    if isinstance(cond, bool) or not isinstance(cond, (int, np.integer)):
        raise TypeError(f"condition must be an int label or None, got {cond!r}")
    if not 0 <= cond < num_classes:
        raise ValueError(f"condition label {cond} outside 0..{num_classes - 1}")


def cfg_epsilon(pair: ScorePair, gamma: float) -> np.ndarray:
    """Offset-form guidance: (1 + gamma) * u_cond - gamma * u_uncond.

    gamma = 0 is the plain conditional prediction, gamma = -1 the unconditional.
    """
    return (1.0 + gamma) * pair.u_cond - gamma * pair.u_uncond


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Isotropic Gaussian mixture sum_c w_c N(mu_c, sigma2 I)."""

    means: np.ndarray  # (C, d)
    sigma2: float
    weights: np.ndarray  # (C,)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.size != means.shape[0]:
            raise ValueError("need one weight per component mean")
        if np.any(weights <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, not 1")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        means.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @classmethod
    def uniform(cls, means, sigma2: float) -> "MixtureSpec":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        c = means.shape[0]
        return cls(means=means, sigma2=sigma2, weights=np.full(c, 1.0 / c))

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator, cond: Condition = None):
        """Draw ``n`` points; returns ``(points, labels)``."""
        if cond is None:
            labels = rng.choice(self.num_classes, size=n, p=self.weights)
        else:
            check_condition(cond, self.num_classes)
            labels = np.full(n, int(cond))
        noise = rng.standard_normal((n, self.dim))
        return self.means[labels] + np.sqrt(self.sigma2) * noise, labels

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "sigma2": self.sigma2,
            "weights": self.weights.tolist(),
        }


def _component_terms(spec: MixtureSpec, sched: NoiseSchedule, x: np.ndarray, t: int):
    check_step(sched, t)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"latent dimension {x.shape[-1]} != mixture dimension {spec.dim}")
    a = sched.alpha_bars[t]
    var = a * spec.sigma2 + 1.0 - a
    diff = x[..., None, :] - np.sqrt(a) * spec.means  # (..., C, d)
    eps = np.sqrt(1.0 - a) * diff / var
    return diff, var, eps


def _posterior(spec: MixtureSpec, diff: np.ndarray, var: float) -> np.ndarray:
    logits = np.log(spec.weights) - 0.5 * np.sum(diff**2, axis=-1) / var
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def analytic_epsilon(
    spec: MixtureSpec, sched: NoiseSchedule, x: np.ndarray, t: int, cond: Condition
) -> np.ndarray:
    """Exact noise prediction -sqrt(1 - abar_t) * grad log q_t(x | cond).

    Under forward noising, x_t | c ~ N(sqrt(abar_t) mu_c, (abar_t sigma2 + 1 - abar_t) I);
    the null condition mixes the component predictions with posterior weights.
    """
    check_condition(cond, spec.num_classes)
    diff, var, eps = _component_terms(spec, sched, x, t)
    if cond is not None:
        return eps[..., cond, :]
    post = _posterior(spec, diff, var)
    return np.einsum("...c,...cd->...d", post, eps)


def log_density(spec: MixtureSpec, sched: NoiseSchedule, x: np.ndarray, t: int, cond: Condition):
    """log q_t(x | cond), used by finite-difference checks of the oracle."""
    check_condition(cond, spec.num_classes)
    diff, var, _ = _component_terms(spec, sched, x, t)
    d = spec.dim
    comp = -0.5 * np.sum(diff**2, axis=-1) / var - 0.5 * d * np.log(2 * np.pi * var)
    if cond is not None:
        return comp[..., cond]
    z = comp + np.log(spec.weights)
    zmax = z.max(axis=-1)
    return zmax + np.log(np.exp(z - zmax[..., None]).sum(axis=-1))


class AnalyticMixtureModel:
    """Closed-form noise predictor for a :class:`MixtureSpec` under a fixed schedule."""

    def __init__(self, spec: MixtureSpec, sched: NoiseSchedule):
        self.spec = spec
        self.sched = sched
        self.dim = spec.dim
        self.num_classes = spec.num_classes

    def epsilon(self, x, t, cond):
        return analytic_epsilon(self.spec, self.sched, x, t, cond)

    def pair(self, x, t, cond):
        check_condition(cond, self.num_classes, allow_null=False)
        diff, var, eps = _component_terms(self.spec, self.sched, x, t)
        post = _posterior(self.spec, diff, var)
        return ScorePair(eps[..., cond, :], np.einsum("...c,...cd->...d", post, eps))


class ConstantEpsilonModel:
    """Predictions that ignore the latent.

    ``u_cond`` / ``u_uncond`` are either one vector of shape (d,) or a table of
    shape (T + 1, d) indexed by step. With a latent-independent predictor the
    DDIM inversion is exact, which makes the approximation-error term vanish.
    """

    def __init__(self, u_cond, u_uncond, num_classes: int = 1):
        self.u_cond = np.asarray(u_cond, dtype=np.float64)
        self.u_uncond = np.asarray(u_uncond, dtype=np.float64)
        if self.u_cond.shape != self.u_uncond.shape or self.u_cond.ndim not in (1, 2):
            raise ValueError("u_cond and u_uncond need equal shape (d,) or (T + 1, d)")
        self.dim = self.u_cond.shape[-1]
        self.num_classes = num_classes

    def _at(self, table, x, t):
        row = table if table.ndim == 1 else table[t]
        return np.broadcast_to(row, np.shape(x)).copy()

    def epsilon(self, x, t, cond):
        check_condition(cond, self.num_classes)
        return self._at(self.u_uncond if cond is None else self.u_cond, x, t)

    def pair(self, x, t, cond):
        check_condition(cond, self.num_classes, allow_null=False)
        return ScorePair(self._at(self.u_cond, x, t), self._at(self.u_uncond, x, t))


class CountingModel:
    """Wraps a model and counts score steps (one ``pair`` call = cond + uncond)."""

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim
        self.num_classes = inner.num_classes
        self.pair_calls = 0
        self.single_calls = 0

    def epsilon(self, x, t, cond):
        self.single_calls += 1
        return self.inner.epsilon(x, t, cond)

    def pair(self, x, t, cond):
        self.pair_calls += 1
        return self.inner.pair(x, t, cond)

    def reset(self):
        self.pair_calls = 0
        self.single_calls = 0
