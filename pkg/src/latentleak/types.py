"""Array-backed value types used at module boundaries.

Images and latent vectors carry semantic metadata (value range, latent
space tag), so they get small frozen wrappers.  Logits and score vectors
are plain float arrays validated at the contract boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError

SPACE_INPUT = "input"
SPACE_INTERMEDIATE = "intermediate"
_SPACE_TAGS = (SPACE_INPUT, SPACE_INTERMEDIATE)

# Bilinear resampling and tanh outputs can overshoot [-1, 1] by float
# roundoff only; anything larger is a real contract violation.
_RANGE_TOL = 1e-9


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractViolationError(f"{name} must have {ndim} dimension(s), got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolationError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C float image with every element in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_float_array(self.data, "image", ndim=3)
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -1.0 - _RANGE_TOL or hi > 1.0 + _RANGE_TOL:
            raise ContractViolationError(
                f"image values outside [-1, 1]: min={lo:.6g}, max={hi:.6g}"
            )
        arr = np.clip(arr, -1.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LatentVector:
    """Single latent with a tag naming the space it lives in."""

    values: np.ndarray
    space_tag: str

    def __post_init__(self):
        arr = as_float_array(self.values, "latent", ndim=1)
        if self.space_tag not in _SPACE_TAGS:
            raise ContractViolationError(f"unknown latent space tag {self.space_tag!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LatentBatch:
    """N latents stacked row-wise, all in the same space."""

    values: np.ndarray
    space_tag: str

    def __post_init__(self):
        arr = as_float_array(self.values, "latent batch", ndim=2)
        if self.space_tag not in _SPACE_TAGS:
            raise ContractViolationError(f"unknown latent space tag {self.space_tag!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, i: int) -> LatentVector:
        return LatentVector(self.values[i], self.space_tag)


def check_logits(o, name: str = "logits") -> np.ndarray:
    arr = as_float_array(o, name, ndim=1)
    if arr.shape[0] < 2:
        raise ContractViolationError(f"{name} must have at least 2 entries")
    return arr


def check_scores(y, name: str = "scores") -> np.ndarray:
    arr = as_float_array(y, name, ndim=1)
    if arr.min() < -1e-12 or arr.max() > 1.0 + 1e-12:
        raise ContractViolationError(f"{name} not in [0, 1]")
    if abs(float(arr.sum()) - 1.0) > 1e-6:
        raise ContractViolationError(f"{name} do not sum to 1")
    return arr


def check_class_index(c, num_classes: int) -> int:
    if not isinstance(c, (int, np.integer)) or isinstance(c, bool):
        raise ContractViolationError("class index must be an integer")
    if not 0 <= int(c) < num_classes:
        raise ContractViolationError(f"class index {c} out of range [0, {num_classes})")
    return int(c)
