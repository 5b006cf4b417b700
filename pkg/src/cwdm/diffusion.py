"""Reverse transition, training objective and network-input assembly."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import torch

from .data import DataError, MODALITIES, condition_order
from .schedule import NoiseSchedule, posterior_params, q_sample
from .wavelet import dwt3d


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def reverse_step(x_t, x0_pred, t: int, schedule: NoiseSchedule, noise=None):
    """One draw from p(x_{t-1} | x_t, x0_pred).

    ``noise`` may be omitted (or is ignored) when the posterior variance is
    zero, which is always the case at ``t = 1``.
    """
    _check_same_shape(x_t, x0_pred, "reverse_step")
    post = posterior_params(schedule, t)
    mean = post.coef_x0 * x0_pred + post.coef_xt * x_t
    if post.variance == 0.0 or noise is None:
        return mean
    _check_same_shape(x_t, noise, "reverse_step noise")
    return mean + math.sqrt(post.variance) * noise


def training_loss(x0_pred, x0_true):
    """Mean (not summed) squared error over all coefficient entries."""
    _check_same_shape(x0_pred, x0_true, "training_loss")
    if isinstance(x0_pred, torch.Tensor):
        return torch.mean((x0_pred - x0_true) ** 2)
    diff = np.asarray(x0_pred, dtype=np.float64) - np.asarray(x0_true, dtype=np.float64)
    return float(np.mean(diff**2))


def encode_subject(volumes: Mapping[str, np.ndarray], target: str, order=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Wavelet coefficients of the target (8 ch) and of the condition stack (24 ch)."""
    order = tuple(order) if order is not None else condition_order(target)
    needed = (target, *order)
    absent = [m for m in needed if m not in volumes]
    if absent:
        raise DataError(f"subject lacks modalities {absent}; training needs all of {MODALITIES}")
    as_tensor = lambda v: torch.as_tensor(np.asarray(v, dtype=np.float32))
    x0 = dwt3d(as_tensor(volumes[target]))
    cond = torch.cat([dwt3d(as_tensor(volumes[m])) for m in order], dim=0)
    return x0, cond


def stack_input(x_t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate noisy target coefficients with the condition."""
    return torch.cat([x_t, cond], dim=-4)


def training_step_inputs(volumes, target: str, t: int, noise, schedule: NoiseSchedule, order=None):
    """Return ``(X_t, x0)`` for one subject: 32-channel network input and clean target coefficients."""
    x0, cond = encode_subject(volumes, target, order)
    x_t = q_sample(x0, t, torch.as_tensor(noise, dtype=x0.dtype), schedule)
    return stack_input(x_t, cond), x0
