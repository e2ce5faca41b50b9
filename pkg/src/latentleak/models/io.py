"""Structured text serialization for reference-model parameters.

A model file is a JSON document:

    {
      "format": "latentleak-params-v1",
      "kind": "<registered model kind>",
      "scalars": {"name": value, ...},
      "arrays": {"name": {"shape": [...], "data": [row-major floats]}, ...}
    }

Array data is stored row-major with full float repr, so a load/save round
trip reproduces parameters exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ContractViolationError
from .classifier import PooledFeatureMap, PrototypeClassifier
from .discriminator import SmoothnessDiscriminator
from .generator import BlobGenerator

FORMAT = "latentleak-params-v1"


def _pack_arrays(arrays: dict[str, np.ndarray]) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
        for name, arr in arrays.items()
    }


def _unpack_array(entry: dict, name: str) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    data = np.asarray(entry["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ContractViolationError(f"array {name!r}: data length does not match shape")
    return data.reshape(shape)


def _generator_to_params(gen: BlobGenerator):
    scalars = {
        "canvas_size": gen.canvas_size,
        "margin_width": gen.margin_width,
        "n_blobs": gen.n_blobs,
        "channels": gen.channels,
        "center_pad": gen.center_pad,
        "sigma_lo": gen.sigma_range[0],
        "sigma_hi": gen.sigma_range[1],
        "weight_lo": gen.weight_range[0],
        "weight_hi": gen.weight_range[1],
    }
    arrays = {
        "mapping_weight": gen.mapping_weight,
        "mapping_bias": gen.mapping_bias,
        "style_weight": gen.style_weight,
        "style_bias": gen.style_bias,
        "mean_latent": gen.mean_latent,
        "background": np.asarray(gen.background),
        "frame_color": np.asarray(gen.frame_color),
    }
    return scalars, arrays


def _generator_from_params(scalars: dict, arrays: dict) -> BlobGenerator:
    return BlobGenerator(
        mapping_weight=arrays["mapping_weight"],
        mapping_bias=arrays["mapping_bias"],
        style_weight=arrays["style_weight"],
        style_bias=arrays["style_bias"],
        mean_latent=arrays["mean_latent"],
        canvas_size=int(scalars["canvas_size"]),
        margin_width=int(scalars["margin_width"]),
        n_blobs=int(scalars["n_blobs"]),
        channels=int(scalars["channels"]),
        center_pad=float(scalars["center_pad"]),
        sigma_range=(float(scalars["sigma_lo"]), float(scalars["sigma_hi"])),
        weight_range=(float(scalars["weight_lo"]), float(scalars["weight_hi"])),
        background=tuple(arrays["background"].tolist()),
        frame_color=tuple(arrays["frame_color"].tolist()),
    )


def _classifier_to_params(model: PrototypeClassifier):
    fm = model.feature_map
    scalars = {
        "native_size": fm.native_size,
        "grid": fm.grid,
        "channels": fm.channels,
        "sharpness": model.sharpness,
    }
    arrays = {
        "mix_weight": fm.mix_weight,
        "mix_bias": fm.mix_bias,
        "prototypes": model.prototypes,
    }
    return scalars, arrays


def _classifier_from_params(scalars: dict, arrays: dict) -> PrototypeClassifier:
    fm = PooledFeatureMap(
        mix_weight=arrays["mix_weight"],
        mix_bias=arrays["mix_bias"],
        native_size=int(scalars["native_size"]),
        grid=int(scalars["grid"]),
        channels=int(scalars["channels"]),
    )
    return PrototypeClassifier(fm, arrays["prototypes"], float(scalars["sharpness"]))


def _feature_map_to_params(fm: PooledFeatureMap):
    scalars = {"native_size": fm.native_size, "grid": fm.grid, "channels": fm.channels}
    arrays = {"mix_weight": fm.mix_weight, "mix_bias": fm.mix_bias}
    return scalars, arrays


def _feature_map_from_params(scalars: dict, arrays: dict) -> PooledFeatureMap:
    return PooledFeatureMap(
        mix_weight=arrays["mix_weight"],
        mix_bias=arrays["mix_bias"],
        native_size=int(scalars["native_size"]),
        grid=int(scalars["grid"]),
        channels=int(scalars["channels"]),
    )


def _discriminator_to_params(d: SmoothnessDiscriminator):
    return {"offset": d.offset, "gain": d.gain}, {}


def _discriminator_from_params(scalars: dict, arrays: dict) -> SmoothnessDiscriminator:
    return SmoothnessDiscriminator(offset=float(scalars["offset"]), gain=float(scalars["gain"]))


_REGISTRY = {
    "blob_generator": (BlobGenerator, _generator_to_params, _generator_from_params),
    "prototype_classifier": (PrototypeClassifier, _classifier_to_params, _classifier_from_params),
    "pooled_feature_map": (PooledFeatureMap, _feature_map_to_params, _feature_map_from_params),
    "smoothness_discriminator": (
        SmoothnessDiscriminator,
        _discriminator_to_params,
        _discriminator_from_params,
    ),
}


def save_model(path, model) -> None:
    for kind, (cls, to_params, _) in _REGISTRY.items():
        if type(model) is cls:
            scalars, arrays = to_params(model)
            doc = {
                "format": FORMAT,
                "kind": kind,
                "scalars": scalars,
                "arrays": _pack_arrays(arrays),
            }
            Path(path).write_text(json.dumps(doc, indent=1))
            return
    raise ContractViolationError(f"cannot serialize model of type {type(model).__name__}")


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolationError(f"model file {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise ContractViolationError(f"unsupported model file format {doc.get('format')!r}")
    kind = doc.get("kind")
    if kind not in _REGISTRY:
        raise ContractViolationError(f"unknown model kind {kind!r}")
    _, _, from_params = _REGISTRY[kind]
    arrays = {name: _unpack_array(entry, name) for name, entry in doc.get("arrays", {}).items()}
    return from_params(doc.get("scalars", {}), arrays)
