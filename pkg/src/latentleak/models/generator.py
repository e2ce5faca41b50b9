"""Procedural image prior: Gaussian blobs rendered from a latent code.

The generator mirrors the two-stage structure of style-based GANs at desk
scale.  A mapping network (affine map plus tanh) sends input latents z to
an intermediate space W, where truncation toward the mean latent is
applied.  Synthesis derives blob parameters (center, size, color, weight)
smoothly from w, renders them on a canvas that includes a fixed frame
around the content region, and squashes the result through tanh so every
output value is structurally inside [-1, 1].

All gradients are closed-form.  The renderer is exact and documented so
tests can evaluate it independently:

    raw(i, j) = background + frame(i, j) + sum_k amp_k * color_k * E_k(i, j)
    E_k(i, j) = exp(-((x_ij - cx_k)^2 + (y_ij - cy_k)^2) / (2 sigma_k^2))
    image = tanh(raw)

with pixel centers at x_ij = (j + 0.5) / W, y_ij = (i + 0.5) / H in canvas
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolationError
from ..rng import RngStream
from ..types import (
    SPACE_INPUT,
    SPACE_INTERMEDIATE,
    ImageTensor,
    LatentBatch,
    LatentVector,
    as_float_array,
)

# Per-blob raw parameter layout: cx, cy, size, r, g, b, weight.
PARAMS_PER_BLOB = 7

_MEAN_LATENT_SAMPLES = 8192


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class BlobGenerator:
    """Deterministic blob renderer with a latent mapping network."""

    mapping_weight: np.ndarray   # (d_w, d_z)
    mapping_bias: np.ndarray     # (d_w,)
    style_weight: np.ndarray     # (n_blobs * PARAMS_PER_BLOB, d_w)
    style_bias: np.ndarray       # (n_blobs * PARAMS_PER_BLOB,)
    mean_latent: np.ndarray      # (d_w,)
    canvas_size: int = 36
    margin_width: int = 6
    n_blobs: int = 1
    channels: int = 3
    center_pad: float = 0.06     # keep blob centers this far inside the content box
    sigma_range: tuple[float, float] = (0.055, 0.16)
    weight_range: tuple[float, float] = (0.55, 1.15)
    background: tuple[float, ...] = (-0.25, -0.28, -0.22)
    frame_color: tuple[float, ...] = (0.45, 0.40, -0.5)

    def __post_init__(self):
        self.mapping_weight = as_float_array(self.mapping_weight, "mapping_weight", 2)
        self.mapping_bias = as_float_array(self.mapping_bias, "mapping_bias", 1)
        self.style_weight = as_float_array(self.style_weight, "style_weight", 2)
        self.style_bias = as_float_array(self.style_bias, "style_bias", 1)
        self.mean_latent = as_float_array(self.mean_latent, "mean_latent", 1)
        if self.mapping_weight.shape[0] != self.mapping_bias.shape[0]:
            raise ContractViolationError("mapping weight/bias shapes disagree")
        if self.style_weight.shape[0] != self.n_blobs * PARAMS_PER_BLOB:
            raise ContractViolationError("style_weight rows must be n_blobs * 7")
        if self.style_weight.shape[1] != self.d_w or self.mean_latent.shape[0] != self.d_w:
            raise ContractViolationError("intermediate latent dimensions disagree")
        if self.style_bias.shape[0] != self.style_weight.shape[0]:
            raise ContractViolationError("style weight/bias shapes disagree")
        if self.canvas_size < 4 or not 0 <= self.margin_width < self.canvas_size // 2:
            raise ContractViolationError("bad canvas/margin geometry")
        if self.channels != 3:
            raise ContractViolationError("renderer is defined for 3 channels")

    # -- dimensions ---------------------------------------------------------

    @property
    def d_z(self) -> int:
        return self.mapping_weight.shape[1]

    @property
    def d_w(self) -> int:
        return self.mapping_weight.shape[0]

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.canvas_size, self.canvas_size, self.channels)

    @property
    def content_box(self) -> tuple[float, float]:
        """Canvas-fraction interval covered by the content region."""
        m = self.margin_width / self.canvas_size
        return m, 1.0 - m

    # -- construction -------------------------------------------------------

    @classmethod
    def random(
        cls,
        rng: RngStream,
        d_z: int = 10,
        d_w: int = 8,
        n_blobs: int = 1,
        canvas_size: int = 36,
        margin_width: int = 6,
        mapping_gain: float = 1.1,
        style_gain: float = 3.5,
        **kwargs,
    ) -> "BlobGenerator":
        """Sample generator weights and estimate the mean latent."""
        mw = rng.normal((d_w, d_z)) * (mapping_gain / np.sqrt(d_z))
        mb = rng.normal(d_w) * 0.1
        n_params = n_blobs * PARAMS_PER_BLOB
        sw = rng.normal((n_params, d_w))
        sw *= style_gain / np.linalg.norm(sw, axis=1, keepdims=True)
        sb = rng.normal(n_params) * 0.3
        gen = cls(
            mapping_weight=mw,
            mapping_bias=mb,
            style_weight=sw,
            style_bias=sb,
            mean_latent=np.zeros(d_w),
            canvas_size=canvas_size,
            margin_width=margin_width,
            n_blobs=n_blobs,
            **kwargs,
        )
        z = rng.normal((_MEAN_LATENT_SAMPLES, d_z))
        gen.mean_latent = gen.map(z).mean(axis=0)
        return gen

    # -- mapping ------------------------------------------------------------

    def map(self, z: np.ndarray) -> np.ndarray:
        """Mapping network m(z) = tanh(W z + b); accepts (d_z,) or (N, d_z)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d_z:
            raise ContractViolationError(f"latent dim {z.shape[-1]} != d_z {self.d_z}")
        return np.tanh(z @ self.mapping_weight.T + self.mapping_bias)

    # -- blob parameters -----------------------------------------------------

    def blob_params(self, w: np.ndarray) -> dict[str, np.ndarray]:
        """Squashed per-blob parameters for intermediate latents (..., d_w).

        Returns arrays keyed cx, cy, sigma, color, weight with a trailing
        blob axis (and a channel axis for color).  Centers live strictly
        inside the content box, sizes and weights inside their configured
        ranges, colors inside (-1, 1).
        """
        w = np.asarray(w, dtype=np.float64)
        raw = w @ self.style_weight.T + self.style_bias
        return self._squash(raw)

    def _squash(self, raw: np.ndarray) -> dict[str, np.ndarray]:
        shape = raw.shape[:-1] + (self.n_blobs, PARAMS_PER_BLOB)
        p = raw.reshape(shape)
        lo, hi = self.content_box
        c_lo, c_hi = lo + self.center_pad, hi - self.center_pad
        s_lo, s_hi = self.sigma_range
        a_lo, a_hi = self.weight_range
        return {
            "raw": p,
            "cx": c_lo + (c_hi - c_lo) * _sigmoid(p[..., 0]),
            "cy": c_lo + (c_hi - c_lo) * _sigmoid(p[..., 1]),
            "sigma": s_lo + (s_hi - s_lo) * _sigmoid(p[..., 2]),
            "color": np.tanh(p[..., 3:6]),
            "weight": a_lo + (a_hi - a_lo) * _sigmoid(p[..., 6]),
        }

    # -- rendering -----------------------------------------------------------

    def _grid(self, out_hw: tuple[int, int], viewport: tuple[float, float, float, float]):
        """Pixel-center coordinates in canvas fractions for a viewport."""
        h, w = out_hw
        y0, y1, x0, x1 = viewport
        yy = y0 + (np.arange(h) + 0.5) * (y1 - y0) / h
        xx = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w
        return yy[:, None], xx[None, :]

    def _frame_mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        lo, hi = self.content_box
        return ((yy < lo) | (yy >= hi) | (xx < lo) | (xx >= hi)).astype(np.float64)

    def render(
        self,
        params: dict[str, np.ndarray],
        out_hw: tuple[int, int] | None = None,
        viewport: tuple[float, float, float, float] | None = None,
        with_frame: bool = True,
    ) -> np.ndarray:
        """Evaluate the documented render formula for batched parameters.

        `params` arrays carry a leading batch axis.  The default viewport
        covers the whole canvas at native resolution.
        """
        if out_hw is None:
            out_hw = (self.canvas_size, self.canvas_size)
        if viewport is None:
            viewport = (0.0, 1.0, 0.0, 1.0)
        yy, xx = self._grid(out_hw, viewport)
        b = params["cx"].shape[0]
        raw = np.empty((b, out_hw[0], out_hw[1], self.channels), dtype=np.float64)
        raw[:] = np.asarray(self.background)
        if with_frame:
            mask = self._frame_mask(yy, xx)[None, :, :, None]
            delta = np.asarray(self.frame_color) - np.asarray(self.background)
            raw += mask * delta
        for k in range(self.n_blobs):
            dx = xx[None] - params["cx"][:, k, None, None]
            dy = yy[None] - params["cy"][:, k, None, None]
            sig = params["sigma"][:, k, None, None]
            e = np.exp(-(dx * dx + dy * dy) / (2.0 * sig * sig))
            amp = params["weight"][:, k, None, None]
            raw += (amp * e)[..., None] * params["color"][:, k, None, None, :]
        return np.tanh(raw)

    def synthesize_batch(self, w: np.ndarray) -> np.ndarray:
        """Render full-canvas images (with frame) for latents (B, d_w)."""
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.d_w:
            raise ContractViolationError("expected latents shaped (B, d_w)")
        return self.render(self.blob_params(w))

    def synthesize_with_cache(self, w: np.ndarray):
        """Forward pass that keeps intermediates for the latent VJP."""
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.d_w:
            raise ContractViolationError("expected latents shaped (B, d_w)")
        params = self.blob_params(w)
        out_hw = (self.canvas_size, self.canvas_size)
        yy, xx = self._grid(out_hw, (0.0, 1.0, 0.0, 1.0))
        b = w.shape[0]
        raw = np.empty((b, out_hw[0], out_hw[1], self.channels), dtype=np.float64)
        raw[:] = np.asarray(self.background)
        mask = self._frame_mask(yy, xx)[None, :, :, None]
        raw += mask * (np.asarray(self.frame_color) - np.asarray(self.background))
        fields = []
        for k in range(self.n_blobs):
            dx = xx[None] - params["cx"][:, k, None, None]
            dy = yy[None] - params["cy"][:, k, None, None]
            sig = params["sigma"][:, k, None, None]
            e = np.exp(-(dx * dx + dy * dy) / (2.0 * sig * sig))
            amp = params["weight"][:, k, None, None]
            raw += (amp * e)[..., None] * params["color"][:, k, None, None, :]
            fields.append((dx, dy, e))
        img = np.tanh(raw)
        cache = {"params": params, "fields": fields, "img": img}
        return img, cache

    def synthesis_vjp(self, cache: dict, g: np.ndarray) -> np.ndarray:
        """Pull an image cotangent (B, H, W, C) back to latent space (B, d_w)."""
        params = cache["params"]
        img = cache["img"]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != img.shape:
            raise ContractViolationError("cotangent shape does not match synthesized images")
        draw = g * (1.0 - img * img)  # through the output tanh
        b = img.shape[0]
        d_raw = np.zeros((b, self.n_blobs, PARAMS_PER_BLOB), dtype=np.float64)
        lo, hi = self.content_box
        c_span = (hi - lo) - 2.0 * self.center_pad
        s_lo, s_hi = self.sigma_range
        a_lo, a_hi = self.weight_range
        p = params["raw"]
        for k, (dx, dy, e) in enumerate(cache["fields"]):
            color = params["color"][:, k]          # (B, 3)
            amp = params["weight"][:, k]           # (B,)
            sig = params["sigma"][:, k]            # (B,)
            dsum = np.einsum("bhwc,bc->bhw", draw, color)
            common = dsum * e                       # (B, H, W)
            # raw parameter 0/1: blob center, through sigmoid
            dcx = amp * (common * dx).sum(axis=(1, 2)) / (sig * sig)
            dcy = amp * (common * dy).sum(axis=(1, 2)) / (sig * sig)
            sig_cx = _sigmoid(p[:, k, 0])
            sig_cy = _sigmoid(p[:, k, 1])
            d_raw[:, k, 0] = dcx * c_span * sig_cx * (1.0 - sig_cx)
            d_raw[:, k, 1] = dcy * c_span * sig_cy * (1.0 - sig_cy)
            # raw parameter 2: sigma, through scaled sigmoid
            r2 = dx * dx + dy * dy
            dsig = amp * (common * r2).sum(axis=(1, 2)) / (sig ** 3)
            sig_s = _sigmoid(p[:, k, 2])
            d_raw[:, k, 2] = dsig * (s_hi - s_lo) * sig_s * (1.0 - sig_s)
            # raw parameters 3..5: color, through tanh
            dcolor = amp[:, None] * np.einsum("bhwc,bhw->bc", draw, e)
            d_raw[:, k, 3:6] = dcolor * (1.0 - color * color)
            # raw parameter 6: weight, through scaled sigmoid
            damp = common.sum(axis=(1, 2))
            sig_a = _sigmoid(p[:, k, 6])
            d_raw[:, k, 6] = damp * (a_hi - a_lo) * sig_a * (1.0 - sig_a)
        return d_raw.reshape(b, -1) @ self.style_weight

    def render_tight(self, raw_style_params: np.ndarray, out_size: int) -> np.ndarray:
        """Render the content box only, without the frame.

        Takes raw (pre-squash) style parameters shaped (B, n_blobs * 7);
        used to build training-style images that never contain the frame.
        """
        raw = as_float_array(raw_style_params, "raw_style_params", 2)
        if raw.shape[1] != self.n_blobs * PARAMS_PER_BLOB:
            raise ContractViolationError("raw style parameter width mismatch")
        lo, hi = self.content_box
        return self.render(
            self._squash(raw),
            out_hw=(out_size, out_size),
            viewport=(lo, hi, lo, hi),
            with_frame=False,
        )


# ---------------------------------------------------------------------------
# Latent mapping operations
# ---------------------------------------------------------------------------


def truncate_latents(
    mapped: np.ndarray, mean_latent: np.ndarray, truncation_psi: float, cutoff: int
) -> np.ndarray:
    """Pull mapped latents toward the mean: w = mean + psi * (m - mean).

    A single latent vector is truncated unconditionally.  For stacked
    per-layer latents (rows), only rows with index < cutoff are truncated.
    """
    if not 0.0 <= truncation_psi <= 1.0:
        raise ContractViolationError("truncation_psi must lie in [0, 1]")
    if cutoff < 0:
        raise ContractViolationError("truncation cutoff must be non-negative")
    mapped = np.asarray(mapped, dtype=np.float64)
    truncated = mean_latent + truncation_psi * (mapped - mean_latent)
    if mapped.ndim <= 1:
        return truncated
    out = mapped.copy()
    rows = min(cutoff, mapped.shape[0])
    out[:rows] = truncated[:rows]
    return out


def map_latent(
    gen: BlobGenerator, z: LatentVector, truncation_psi: float = 0.5, cutoff: int = 8
) -> LatentVector:
    """Map one input latent to the truncated intermediate space."""
    if z.space_tag != SPACE_INPUT:
        raise ContractViolationError("map_latent expects an input-space latent")
    if z.dim != gen.d_z:
        raise ContractViolationError(f"latent dim {z.dim} != generator d_z {gen.d_z}")
    w = truncate_latents(gen.map(z.values), gen.mean_latent, truncation_psi, cutoff)
    return LatentVector(w, SPACE_INTERMEDIATE)


def map_latent_batch(
    gen: BlobGenerator, z: LatentBatch, truncation_psi: float = 0.5, cutoff: int = 8
) -> LatentBatch:
    if z.space_tag != SPACE_INPUT:
        raise ContractViolationError("map_latent_batch expects input-space latents")
    if z.dim != gen.d_z:
        raise ContractViolationError(f"latent dim {z.dim} != generator d_z {gen.d_z}")
    if not 0.0 <= truncation_psi <= 1.0:
        raise ContractViolationError("truncation_psi must lie in [0, 1]")
    mapped = gen.map(z.values)
    w = gen.mean_latent + truncation_psi * (mapped - gen.mean_latent)
    return LatentBatch(w, SPACE_INTERMEDIATE)


def synthesize(gen: BlobGenerator, w: LatentVector) -> ImageTensor:
    """Render one intermediate latent to an image."""
    if w.space_tag != SPACE_INTERMEDIATE:
        raise ContractViolationError("synthesize expects an intermediate-space latent")
    if w.dim != gen.d_w:
        raise ContractViolationError(f"latent dim {w.dim} != generator d_w {gen.d_w}")
    return ImageTensor(gen.synthesize_batch(w.values[None])[0])
