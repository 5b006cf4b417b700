"""Variance schedules and the closed-form quantities derived from them.

Timesteps are 1-based. Every table has length ``T + 1`` and index 0 holds the
``t = 0`` convention (``alpha_bar[0] = 1``), so ``table[t]`` reads naturally.
All tables are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


class ScheduleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PosteriorParams:
    coef_x0: float
    coef_xt: float
    variance: float


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    one_minus_alpha_bar: np.ndarray = field(repr=False)
    beta_tilde: np.ndarray = field(repr=False)

    def params(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t


def _linear_betas(T: int, beta_start: float, beta_end: float) -> np.ndarray:
    if T == 1:
        return np.array([beta_start], dtype=np.float64)
    return np.linspace(beta_start, beta_end, T, dtype=np.float64)


def _cosine_betas(T: int) -> np.ndarray:
    def f(t):
        return math.cos((t / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    betas = [min(1.0 - f(t) / f(t - 1), COSINE_MAX_BETA) for t in range(1, T + 1)]
    return np.asarray(betas, dtype=np.float64)


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear or cosine schedule.

    The cosine schedule ignores ``beta_start``/``beta_end``; they are kept on
    the object only so the parameters round-trip through checkpoints.
    """
    if int(T) != T or T < 1:
        raise ScheduleConfigError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ScheduleConfigError(
                f"linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )
        betas = _linear_betas(T, beta_start, beta_end)
    elif kind == "cosine":
        betas = _cosine_betas(T)
    else:
        raise ScheduleConfigError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")

    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    # 1 - alpha_bar via its own recurrence: exact at t=1 and no cancellation for small t
    omab = np.zeros(T + 1)
    for t in range(1, T + 1):
        omab[t] = omab[t - 1] * alpha[t] + beta[t]
    beta_tilde = np.zeros(T + 1)
    beta_tilde[1:] = omab[:-1] / omab[1:] * beta[1:]
    for table in (beta, alpha, alpha_bar, omab, beta_tilde):
        table.setflags(write=False)
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, omab, beta_tilde)


def posterior_params(schedule: NoiseSchedule, t: int) -> PosteriorParams:
    """Weights of the Gaussian posterior q(x_{t-1} | x_t, x_0) at step ``t``."""
    t = schedule.check_t(t)
    denom = schedule.one_minus_alpha_bar[t]
    coef_x0 = math.sqrt(schedule.alpha_bar[t - 1]) * schedule.beta[t] / denom
    coef_xt = math.sqrt(schedule.alpha[t]) * schedule.one_minus_alpha_bar[t - 1] / denom
    return PosteriorParams(float(coef_x0), float(coef_xt), float(schedule.beta_tilde[t]))


def q_sample(x0, t: int, noise, schedule: NoiseSchedule):
    """Draw x_t from q(x_t | x_0) given explicit standard-normal ``noise``."""
    t = schedule.check_t(t)
    if tuple(noise.shape) != tuple(x0.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    a = math.sqrt(schedule.alpha_bar[t])
    b = math.sqrt(schedule.one_minus_alpha_bar[t])
    return a * x0 + b * noise
