"""Prototype classifier on smooth pooled image features.

The feature map block-averages the image onto a coarse grid, mixes the
pooled values through a fixed affine map, and squashes with tanh.  Class
logits are negative scaled squared distances to per-class prototype
vectors, so the classifier is confident exactly where the features match
a prototype and every gradient exists in closed form.

Inputs of any spatial size are accepted: images whose size differs from
the native input are bilinearly resized first (the resize is part of the
differentiated graph).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolationError
from ..rng import RngStream
from ..transforms import _apply_weights, _apply_weights_adjoint, _resize_matrix
from ..types import ImageTensor, as_float_array
from .base import DifferentiableModel


def _unwrap_image(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 3:
        raise ContractViolationError("expected an image shaped (..., H, W, C)")
    return arr


@dataclass
class PooledFeatureMap:
    """phi(x) = tanh(W . blockpool(x) + b) on a fixed native input size."""

    mix_weight: np.ndarray  # (feature_dim, grid * grid * channels)
    mix_bias: np.ndarray    # (feature_dim,)
    native_size: int = 24
    grid: int = 6
    channels: int = 3

    def __post_init__(self):
        self.mix_weight = as_float_array(self.mix_weight, "mix_weight", 2)
        self.mix_bias = as_float_array(self.mix_bias, "mix_bias", 1)
        if self.native_size % self.grid != 0:
            raise ContractViolationError("native_size must be divisible by the pooling grid")
        pooled = self.grid * self.grid * self.channels
        if self.mix_weight.shape[1] != pooled:
            raise ContractViolationError(
                f"mix_weight must have {pooled} columns, got {self.mix_weight.shape[1]}"
            )
        if self.mix_bias.shape[0] != self.mix_weight.shape[0]:
            raise ContractViolationError("mix weight/bias shapes disagree")

    @property
    def feature_dim(self) -> int:
        return self.mix_weight.shape[0]

    @classmethod
    def random(
        cls,
        rng: RngStream,
        feature_dim: int = 24,
        native_size: int = 24,
        grid: int = 6,
        channels: int = 3,
        gain: float = 2.2,
    ) -> "PooledFeatureMap":
        n = grid * grid * channels
        w = rng.normal((feature_dim, n)) * (gain / np.sqrt(n))
        b = rng.normal(feature_dim) * 0.05
        return cls(w, b, native_size=native_size, grid=grid, channels=channels)

    # -- forward -------------------------------------------------------------

    def _to_native(self, x: np.ndarray):
        """Resize to the native size when needed; returns (native, vjp)."""
        h, w = x.shape[-3], x.shape[-2]
        if x.shape[-1] != self.channels:
            raise ContractViolationError(f"expected {self.channels} channels, got {x.shape[-1]}")
        if (h, w) == (self.native_size, self.native_size):
            return x, lambda g: g
        r = _resize_matrix(h, self.native_size)
        c = _resize_matrix(w, self.native_size)
        return _apply_weights(r, x, c), lambda g: _apply_weights_adjoint(r, g, c)

    def _pool(self, x: np.ndarray) -> np.ndarray:
        g = self.grid
        block = self.native_size // g
        lead = x.shape[:-3]
        blocks = x.reshape(lead + (g, block, g, block, self.channels))
        return blocks.mean(axis=(-4, -2)).reshape(lead + (-1,))

    def _pool_adjoint(self, gp: np.ndarray, lead: tuple[int, ...]) -> np.ndarray:
        g = self.grid
        block = self.native_size // g
        gp = gp.reshape(lead + (g, 1, g, 1, self.channels))
        spread = np.broadcast_to(gp / (block * block), lead + (g, block, g, block, self.channels))
        return spread.reshape(lead + (self.native_size, self.native_size, self.channels))

    def features(self, x) -> np.ndarray:
        """Feature vectors for (..., H, W, C) input; output (..., feature_dim)."""
        f, _ = self.features_with_vjp(x)
        return f

    def features_with_vjp(self, x):
        arr = _unwrap_image(x)
        native, resize_vjp = self._to_native(arr)
        pooled = self._pool(native)
        pre = pooled @ self.mix_weight.T + self.mix_bias
        f = np.tanh(pre)
        lead = arr.shape[:-3]

        def vjp(gf: np.ndarray) -> np.ndarray:
            gf = np.asarray(gf, dtype=np.float64)
            dpre = gf * (1.0 - f * f)
            dpool = dpre @ self.mix_weight
            return resize_vjp(self._pool_adjoint(dpool, lead))

        return f, vjp


@dataclass
class PrototypeClassifier(DifferentiableModel):
    """Logits o_c = -sharpness * || phi(x) - prototype_c ||_2^2."""

    feature_map: PooledFeatureMap
    prototypes: np.ndarray  # (num_classes, feature_dim)
    sharpness: float

    def __post_init__(self):
        self.prototypes = as_float_array(self.prototypes, "prototypes", 2)
        if self.prototypes.shape[1] != self.feature_map.feature_dim:
            raise ContractViolationError("prototype width must equal the feature dimension")
        if self.prototypes.shape[0] < 2:
            raise ContractViolationError("need at least 2 classes")
        if not np.isfinite(self.sharpness) or self.sharpness <= 0:
            raise ContractViolationError("sharpness must be positive")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        n = self.feature_map.native_size
        return (n, n, self.feature_map.channels)

    # -- feature-space views ---------------------------------------------------

    def features(self, x) -> np.ndarray:
        return self.feature_map.features(x)

    def logits_from_features(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        diff = f[..., None, :] - self.prototypes
        return -self.sharpness * np.sum(diff * diff, axis=-1)

    # -- DifferentiableModel contract -------------------------------------------

    def forward(self, x) -> np.ndarray:
        return self.logits_from_features(self.features(x))

    def forward_with_vjp(self, x):
        f, feat_vjp = self.feature_map.features_with_vjp(x)
        logits = self.logits_from_features(f)

        def vjp(g_logits: np.ndarray) -> np.ndarray:
            go = np.asarray(g_logits, dtype=np.float64)
            if go.shape != logits.shape:
                raise ContractViolationError("cotangent shape does not match logits")
            # d logits_c / d f = -2 * sharpness * (f - prototype_c)
            total = go.sum(axis=-1, keepdims=True)
            gf = -2.0 * self.sharpness * (f * total - go @ self.prototypes)
            return feat_vjp(gf)

        return logits, vjp

    def input_gradient(self, x, cotangent: np.ndarray) -> np.ndarray:
        _, vjp = self.forward_with_vjp(x)
        return vjp(cotangent)

    # -- construction -------------------------------------------------------------

    @classmethod
    def from_examples(
        cls,
        feature_map: PooledFeatureMap,
        images_by_class: list[np.ndarray],
        margin_target: float = 25.0,
    ) -> "PrototypeClassifier":
        """Build prototypes as class feature means and calibrate sharpness.

        Sharpness is set so that the median gap between cross-class and
        within-class squared feature distances maps to `margin_target`
        logit units, which fixes how quickly softmax saturates.
        """
        if len(images_by_class) < 2:
            raise ContractViolationError("need at least 2 classes")
        feats = [feature_map.features(imgs) for imgs in images_by_class]
        protos = np.stack([f.mean(axis=0) for f in feats])
        within = []
        cross = []
        for c, f in enumerate(feats):
            d = f[:, None, :] - protos[None, :, :]
            d2 = np.sum(d * d, axis=-1)
            within.extend(d2[:, c].tolist())
            cross.extend(np.delete(d2, c, axis=1).ravel().tolist())
        gap = float(np.median(cross) - np.median(within))
        if gap <= 0:
            raise ContractViolationError("classes are not separable in feature space")
        return cls(feature_map, protos, sharpness=margin_target / gap)


def classify(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and softmax scores; supports batched input (..., H, W, C)."""
    logits = model.forward(x)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    scores = e / e.sum(axis=-1, keepdims=True)
    return logits, scores
