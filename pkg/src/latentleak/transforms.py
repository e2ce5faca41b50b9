"""Differentiable image transformations with explicit vector-Jacobian products.

All primitives accept arrays shaped (..., H, W, C) and treat leading axes
as batch dimensions.  Bilinear resampling is expressed as separable row and
column weight matrices, so the forward pass is an einsum and the adjoint is
the transposed einsum.  Pipelines record per-stage context on the forward
pass and compose the stage adjoints in reverse order.

Random crops consume their randomness from an RngStream passed by the
caller; a draw is a single counter tick, so a crop is reproducible from
(master_seed, stream_id, counter) alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolationError
from .rng import RngStream
from .types import ImageTensor

CENTER_CROP = "center_crop"
RESIZE = "resize"
HFLIP = "hflip"
RANDOM_RESIZED_CROP = "random_resized_crop"

_KINDS = (CENTER_CROP, RESIZE, HFLIP, RANDOM_RESIZED_CROP)


def _as_size(value, name: str) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        value = (int(value), int(value))
    try:
        h, w = int(value[0]), int(value[1])
    except (TypeError, IndexError) as exc:
        raise ContractViolationError(f"{name} must be an int or (h, w) pair") from exc
    if h < 1 or w < 1:
        raise ContractViolationError(f"{name} must be positive, got {(h, w)}")
    return h, w


def _as_range(value, name: str, positive: bool = True) -> tuple[float, float]:
    try:
        lo, hi = float(value[0]), float(value[1])
    except (TypeError, IndexError) as exc:
        raise ContractViolationError(f"{name} must be a (low, high) pair") from exc
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ContractViolationError(f"{name} must satisfy low <= high, got {(lo, hi)}")
    if positive and lo <= 0.0:
        raise ContractViolationError(f"{name} must be strictly positive")
    return lo, hi


@dataclass(frozen=True)
class TransformSpec:
    """Declarative description of one pipeline stage."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ContractViolationError(f"unknown transform kind {self.kind!r}")
        p = dict(self.params)
        if self.kind == CENTER_CROP:
            size = _as_size(p.pop("size", None), "center_crop size")
            clean = {"size": size}
        elif self.kind == RESIZE:
            size = _as_size(p.pop("size", None), "resize size")
            clean = {"size": size}
        elif self.kind == HFLIP:
            prob = float(p.pop("probability", 1.0))
            if not 0.0 <= prob <= 1.0:
                raise ContractViolationError("hflip probability must lie in [0, 1]")
            clean = {"probability": prob}
        else:  # RANDOM_RESIZED_CROP
            area = _as_range(p.pop("area_range", None), "area_range")
            if area[1] > 1.0:
                raise ContractViolationError("area_range upper bound must be <= 1")
            ratio = _as_range(p.pop("ratio_range", None), "ratio_range")
            out = _as_size(p.pop("out_size", None), "out_size")
            clean = {"area_range": area, "ratio_range": ratio, "out_size": out}
        if p:
            raise ContractViolationError(
                f"unknown parameter(s) for {self.kind}: {sorted(p)}"
            )
        object.__setattr__(self, "params", clean)

    @property
    def is_random(self) -> bool:
        if self.kind == RANDOM_RESIZED_CROP:
            return True
        if self.kind == HFLIP:
            return 0.0 < self.params["probability"] < 1.0
        return False


@dataclass(frozen=True)
class TransformPipeline:
    """Ordered sequence of transform stages; empty means identity."""

    specs: tuple[TransformSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def has_random(self) -> bool:
        return any(s.is_random for s in self.specs)

    def deterministic_only(self) -> "TransformPipeline":
        """Copy of this pipeline with every random stage removed."""
        return TransformPipeline(tuple(s for s in self.specs if not s.is_random))

    def __len__(self) -> int:
        return len(self.specs)


# ---------------------------------------------------------------------------
# Bilinear resampling kernels
# ---------------------------------------------------------------------------


def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out_size, in_size) bilinear weight matrix.

    Output sample d reads the source at s = (d + 0.5) * in/out - 0.5,
    clamped to the valid range, and blends the two bracketing samples.
    """
    d = np.arange(out_size, dtype=np.float64)
    s = (d + 0.5) * (in_size / out_size) - 0.5
    s = np.clip(s, 0.0, in_size - 1.0)
    i0 = np.floor(s).astype(np.int64)
    frac = s - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    w = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(w, (rows, i0), 1.0 - frac)
    np.add.at(w, (rows, i1), frac)
    return w


def _crop_resize_matrix(in_size: int, start: int, crop: int, out_size: int) -> np.ndarray:
    """Weights mapping a full axis to out_size samples of [start, start+crop)."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    m[:, start:start + crop] = _resize_matrix(crop, out_size)
    return m


def _hw(x: np.ndarray) -> tuple[int, int]:
    if x.ndim < 3:
        raise ContractViolationError("image arrays must be shaped (..., H, W, C)")
    return x.shape[-3], x.shape[-2]


def _apply_weights(r: np.ndarray, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.einsum("oh,...hwc,pw->...opc", r, x, c, optimize=True)


def _apply_weights_adjoint(r: np.ndarray, g: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.einsum("oh,...opc,pw->...hwc", r, g, c, optimize=True)


# ---------------------------------------------------------------------------
# Primitive forward passes with adjoint closures
# ---------------------------------------------------------------------------


def _center_crop_fwd(x: np.ndarray, size: tuple[int, int]):
    h, w = size
    hh, ww = _hw(x)
    if h > hh or w > ww:
        raise ContractViolationError(f"crop size {(h, w)} exceeds image size {(hh, ww)}")
    i0 = (hh - h) // 2
    j0 = (ww - w) // 2
    y = x[..., i0:i0 + h, j0:j0 + w, :].copy()

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[..., i0:i0 + h, j0:j0 + w, :] = g
        return gx

    return y, vjp


def _resize_fwd(x: np.ndarray, size: tuple[int, int]):
    hh, ww = _hw(x)
    r = _resize_matrix(hh, size[0])
    c = _resize_matrix(ww, size[1])
    y = _apply_weights(r, x, c)
    return y, lambda g: _apply_weights_adjoint(r, g, c)


def _hflip_fwd(x: np.ndarray):
    return x[..., :, ::-1, :].copy(), lambda g: g[..., :, ::-1, :].copy()


def draw_crop_params(
    hw: tuple[int, int],
    area_range: tuple[float, float],
    ratio_range: tuple[float, float],
    rng: RngStream,
) -> tuple[int, int, int, int]:
    """Sample (top, left, height, width) of a random patch.

    Area fraction is uniform over area_range, the width/height ratio is
    log-uniform over ratio_range.  Ten attempts are made to fit the patch
    inside the image; on failure the maximal centered patch with the ratio
    clamped into ratio_range is used.
    """
    hh, ww = int(hw[0]), int(hw[1])
    a_lo, a_hi = area_range
    r_lo, r_hi = ratio_range
    log_r_lo, log_r_hi = math.log(r_lo), math.log(r_hi)

    for _ in range(10):
        u = rng.uniform(size=4)
        area = (a_lo + (a_hi - a_lo) * float(u[0])) * hh * ww
        ratio = math.exp(log_r_lo + (log_r_hi - log_r_lo) * float(u[1]))
        wp = max(1, round(math.sqrt(area * ratio)))
        hp = max(1, round(math.sqrt(area / ratio)))
        if hp <= hh and wp <= ww:
            i0 = min(int(u[2] * (hh - hp + 1)), hh - hp)
            j0 = min(int(u[3] * (ww - wp + 1)), ww - wp)
            return i0, j0, hp, wp

    # Maximal centered patch with a feasible aspect ratio.
    in_ratio = ww / hh
    if in_ratio < r_lo:
        wp, hp = ww, max(1, round(ww / r_lo))
    elif in_ratio > r_hi:
        hp, wp = hh, max(1, round(hh * r_hi))
    else:
        hp, wp = hh, ww
    if hp > hh or wp > ww:
        raise ContractViolationError("no valid patch exists for the requested ranges")
    return (hh - hp) // 2, (ww - wp) // 2, hp, wp


def _crop_resize_fwd(x: np.ndarray, i0: int, j0: int, hp: int, wp: int, out: tuple[int, int]):
    xc = x[..., i0:i0 + hp, j0:j0 + wp, :]
    r = _resize_matrix(hp, out[0])
    c = _resize_matrix(wp, out[1])
    y = _apply_weights(r, xc, c)

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[..., i0:i0 + hp, j0:j0 + wp, :] = _apply_weights_adjoint(r, g, c)
        return gx

    return y, vjp


# ---------------------------------------------------------------------------
# Public single-call primitives
# ---------------------------------------------------------------------------


def _unwrap(x):
    if isinstance(x, ImageTensor):
        return x.data, True
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 3:
        raise ContractViolationError("image arrays must be shaped (..., H, W, C)")
    return arr, False


def _rewrap(y: np.ndarray, wrapped: bool):
    return ImageTensor(y) if wrapped else y


def center_crop(x, size):
    arr, wrapped = _unwrap(x)
    y, _ = _center_crop_fwd(arr, _as_size(size, "size"))
    return _rewrap(y, wrapped)


def resize_bilinear(x, size):
    arr, wrapped = _unwrap(x)
    y, _ = _resize_fwd(arr, _as_size(size, "size"))
    return _rewrap(y, wrapped)


def hflip(x):
    arr, wrapped = _unwrap(x)
    y, _ = _hflip_fwd(arr)
    return _rewrap(y, wrapped)


def random_resized_crop(x, area_range, ratio_range, out_size, rng: RngStream):
    arr, wrapped = _unwrap(x)
    area = _as_range(area_range, "area_range")
    ratio = _as_range(ratio_range, "ratio_range")
    out = _as_size(out_size, "out_size")
    i0, j0, hp, wp = draw_crop_params(_hw(arr), area, ratio, rng)
    y, _ = _crop_resize_fwd(arr, i0, j0, hp, wp, out)
    return _rewrap(y, wrapped)


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


def _stage_fwd(spec: TransformSpec, x: np.ndarray, rng: RngStream | None):
    if spec.kind == CENTER_CROP:
        return _center_crop_fwd(x, spec.params["size"])
    if spec.kind == RESIZE:
        return _resize_fwd(x, spec.params["size"])
    if spec.kind == HFLIP:
        prob = spec.params["probability"]
        if prob >= 1.0:
            return _hflip_fwd(x)
        if prob <= 0.0:
            return x, lambda g: g
        if rng is None:
            raise ContractViolationError("random hflip requires an rng stream")
        if float(rng.uniform()) < prob:
            return _hflip_fwd(x)
        return x, lambda g: g
    # RANDOM_RESIZED_CROP
    if rng is None:
        raise ContractViolationError("random_resized_crop requires an rng stream")
    i0, j0, hp, wp = draw_crop_params(
        _hw(x), spec.params["area_range"], spec.params["ratio_range"], rng
    )
    return _crop_resize_fwd(x, i0, j0, hp, wp, spec.params["out_size"])


def apply_pipeline(pipeline: TransformPipeline, x, rng: RngStream | None = None):
    """Run every stage in order.  Random stages draw from `rng`."""
    y, _ = apply_pipeline_vjp(pipeline, x, rng)
    return y


def apply_pipeline_vjp(
    pipeline: TransformPipeline, x, rng: RngStream | None = None
) -> tuple[object, Callable[[np.ndarray], np.ndarray]]:
    """Forward pass plus the adjoint of the pipeline's linearization.

    Randomness is frozen at the forward pass: the returned vjp closure
    backpropagates through exactly the crops that were drawn.
    """
    if pipeline.has_random and rng is None:
        raise ContractViolationError("pipeline contains random stages but no rng was given")
    arr, wrapped = _unwrap(x)
    vjps = []
    for spec in pipeline.specs:
        arr, vjp = _stage_fwd(spec, arr, rng)
        vjps.append(vjp)

    def pipeline_vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        for stage_vjp in reversed(vjps):
            g = stage_vjp(g)
        return g

    return _rewrap(arr, wrapped), pipeline_vjp


def apply_pipeline_batch_vjp(
    pipeline: TransformPipeline,
    x: np.ndarray,
    rngs: Sequence[RngStream] | None = None,
):
    """Batched pipeline where each image owns its random stream.

    `x` is (B, H, W, C); `rngs` must contain B streams when the pipeline
    has random stages.  Deterministic stages run as one vectorized call;
    random crops build per-image resampling matrices and contract them in
    a single einsum.
    """
    if x.ndim != 4:
        raise ContractViolationError("batched pipeline expects (B, H, W, C)")
    b = x.shape[0]
    if pipeline.has_random:
        if rngs is None or len(rngs) != b:
            raise ContractViolationError("need one rng stream per batch image")
    arr = x
    vjps = []
    for spec in pipeline.specs:
        if spec.kind == RANDOM_RESIZED_CROP:
            hh, ww = _hw(arr)
            out = spec.params["out_size"]
            rmat = np.zeros((b, out[0], hh), dtype=np.float64)
            cmat = np.zeros((b, out[1], ww), dtype=np.float64)
            for i in range(b):
                i0, j0, hp, wp = draw_crop_params(
                    (hh, ww), spec.params["area_range"], spec.params["ratio_range"], rngs[i]
                )
                rmat[i] = _crop_resize_matrix(hh, i0, hp, out[0])
                cmat[i] = _crop_resize_matrix(ww, j0, wp, out[1])
            arr = np.einsum("boh,bhwc,bpw->bopc", rmat, arr, cmat, optimize=True)
            vjps.append(
                lambda g, rmat=rmat, cmat=cmat: np.einsum(
                    "boh,bopc,bpw->bhwc", rmat, g, cmat, optimize=True
                )
            )
        elif spec.kind == HFLIP and spec.is_random:
            flips = np.array([float(r.uniform()) < spec.params["probability"] for r in rngs])
            arr = arr.copy()
            arr[flips] = arr[flips][:, :, ::-1, :]
            def vjp(g, flips=flips):
                g = g.copy()
                g[flips] = g[flips][:, :, ::-1, :]
                return g
            vjps.append(vjp)
        else:
            arr, vjp = _stage_fwd(spec, arr, None)
            vjps.append(vjp)

    def pipeline_vjp(g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        for stage_vjp in reversed(vjps):
            g = stage_vjp(g)
        return g

    return arr, pipeline_vjp


def apply_pipeline_batch(pipeline, x, rngs=None):
    y, _ = apply_pipeline_batch_vjp(pipeline, x, rngs)
    return y
