"""Single-level separable 3D Haar transform.

Coefficients are stacked on a channel axis of length 8, placed directly in
front of the three spatial axes. Channel ``k`` holds the subband whose
depth/height/width filters are given by the bits of ``k`` (most significant
bit = depth, 0 = low-pass, 1 = high-pass), i.e. the order is
LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH.

Both ``numpy.ndarray`` and ``torch.Tensor`` inputs are accepted; the result
has the same type as the input. Any leading (batch/channel) axes are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SUBBANDS = ("LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH")
_S = 1.0 / math.sqrt(2.0)


class PaddingRequiredError(ValueError):
    """Raised when a transform receives an odd spatial dimension."""


def _every_other(x, axis: int, start: int):
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, None, 2)
    return x[tuple(index)]


def _stack(arrays, axis: int):
    if isinstance(arrays[0], torch.Tensor):
        return torch.stack(arrays, dim=axis)
    return np.stack(arrays, axis=axis)


def _analysis(x, axis: int):
    even = _every_other(x, axis, 0)
    odd = _every_other(x, axis, 1)
    return (even + odd) * _S, (even - odd) * _S


def _synthesis(low, high, axis: int):
    even = (low + high) * _S
    odd = (low - high) * _S
    merged = _stack([even, odd], axis + 1)
    shape = list(low.shape)
    shape[axis] *= 2
    return merged.reshape(shape)


def dwt3d(volume):
    """Forward transform of ``(..., D, H, W)`` into ``(..., 8, D/2, H/2, W/2)``."""
    if volume.ndim < 3:
        raise ValueError(f"expected at least 3 dims, got shape {tuple(volume.shape)}")
    spatial = tuple(volume.shape[-3:])
    if any(n % 2 for n in spatial):
        raise PaddingRequiredError(
            f"spatial shape {spatial} has an odd dimension; pad to even first (pad_to_even)"
        )
    nd = volume.ndim
    bands = [volume]
    for axis in (nd - 3, nd - 2, nd - 1):
        bands = [part for band in bands for part in _analysis(band, axis)]
    return _stack(bands, nd - 3)


def idwt3d(coeffs):
    """Inverse of :func:`dwt3d`; ``coeffs`` must have exactly 8 channels on axis -4."""
    if coeffs.ndim < 4 or coeffs.shape[-4] != 8:
        raise ValueError(
            f"expected 8 subbands on axis -4, got shape {tuple(coeffs.shape)}; "
            "slice a concatenated stack into 8-channel groups first"
        )
    nd = coeffs.ndim - 1
    bands = [coeffs[..., k, :, :, :] for k in range(8)]
    # undo width, then height, then depth; pairs are adjacent channel indices
    for axis in (nd - 1, nd - 2, nd - 3):
        bands = [_synthesis(bands[i], bands[i + 1], axis) for i in range(0, len(bands), 2)]
    return bands[0]


@dataclass(frozen=True)
class PaddingRecord:
    original_shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]

    @property
    def pads(self) -> tuple[int, int, int]:
        return tuple(p - o for p, o in zip(self.padded_shape, self.original_shape))


def pad_to_even(volume: np.ndarray, multiple: int = 2) -> tuple[np.ndarray, PaddingRecord]:
    """Zero-pad the trailing edge of each spatial axis up to a multiple of ``multiple``.

    The default pads odd axes by one voxel. Callers feeding a multi-level
    U-Net pass a larger (even) multiple so the coefficient grid divides evenly.
    """
    if multiple < 2 or multiple % 2:
        raise ValueError(f"multiple must be an even integer >= 2, got {multiple}")
    original = tuple(int(n) for n in volume.shape[-3:])
    pads = [-n % multiple for n in original]
    record = PaddingRecord(original, tuple(n + p for n, p in zip(original, pads)))
    if not any(pads):
        return volume, record
    width = [(0, 0)] * (volume.ndim - 3) + [(0, p) for p in pads]
    return np.pad(volume, width, mode="constant"), record


def crop_with_record(volume, record: PaddingRecord):
    d, h, w = record.original_shape
    return volume[..., :d, :h, :w]
