"""Reference discriminator scoring image smoothness.

Generator outputs are smooth blob renders, so a cheap realism signal is
the high-frequency residual energy: the mean squared difference between
each interior pixel and its 3x3 neighborhood average.  The logit is

    d = offset - gain * mean((x - box3(x))^2)

which is high for smooth (in-distribution) images and low for noisy ones.
The gradient is closed-form via the adjoint of the box filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolationError
from ..types import ImageTensor
from .base import DifferentiableModel
from .classifier import _unwrap_image


def _box3(x: np.ndarray) -> np.ndarray:
    """3x3 box average of the interior region; output trims a 1-pixel rim."""
    acc = np.zeros_like(x[..., 1:-1, 1:-1, :])
    h, w = x.shape[-3], x.shape[-2]
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            acc += x[..., di:h - 2 + di, dj:w - 2 + dj, :]
    return acc / 9.0


def _box3_adjoint(g: np.ndarray, full_shape: tuple[int, ...]) -> np.ndarray:
    out = np.zeros(full_shape, dtype=np.float64)
    h, w = full_shape[-3], full_shape[-2]
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            out[..., di:h - 2 + di, dj:w - 2 + dj, :] += g / 9.0
    return out


@dataclass
class SmoothnessDiscriminator(DifferentiableModel):
    offset: float = 4.0
    gain: float = 400.0

    def __post_init__(self):
        if not (np.isfinite(self.offset) and np.isfinite(self.gain)) or self.gain <= 0:
            raise ContractViolationError("offset must be finite and gain positive")

    def forward(self, x) -> np.ndarray:
        """Realism logits for (..., H, W, C) input; output shape (...,)."""
        arr = _unwrap_image(x)
        if arr.shape[-3] < 3 or arr.shape[-2] < 3:
            raise ContractViolationError("image too small for a 3x3 residual")
        resid = arr[..., 1:-1, 1:-1, :] - _box3(arr)
        return self.offset - self.gain * (resid * resid).mean(axis=(-3, -2, -1))

    def input_gradient(self, x, cotangent) -> np.ndarray:
        arr = _unwrap_image(x)
        resid = arr[..., 1:-1, 1:-1, :] - _box3(arr)
        n = resid.shape[-3] * resid.shape[-2] * resid.shape[-1]
        ct = np.asarray(cotangent, dtype=np.float64)
        if ct.shape != arr.shape[:-3]:
            raise ContractViolationError("cotangent shape must match forward output")
        dresid = (-self.gain * 2.0 / n) * resid * ct[..., None, None, None]
        gx = np.zeros(arr.shape, dtype=np.float64)
        gx[..., 1:-1, 1:-1, :] = dresid
        gx -= _box3_adjoint(dresid, arr.shape)
        return gx
