"""Named single-change variants of a base experiment configuration.

Each preset changes exactly one part of the attack relative to the base
config; everything else, including the seed, is inherited.  The pipeline
presets spell out the full transform list for the toy task geometry
(36 px canvas, 24 px classifier input) instead of patching the defaults,
so a saved config of an ablation run is self-describing.
"""

from __future__ import annotations

import copy

from ..benchmark import CROP_FRACTION, NATIVE_SIZE, OPT_AREA, OPT_RATIO, SEL_AREA, SEL_RATIO
from ..errors import ConfigError
from .config import ExperimentConfig, parse_config

_CANVAS = 36
_CROP = round(_CANVAS * CROP_FRACTION)


def _steps(*, crop: int | None, size: int, rrc: str | None):
    steps = []
    if crop is not None:
        steps.append({"kind": "center_crop", "params": {"size": [crop, crop]}})
    steps.append({"kind": "resize", "params": {"size": [size, size]}})
    if rrc == "optimization":
        area, ratio = OPT_AREA, OPT_RATIO
    elif rrc == "selection":
        area, ratio = SEL_AREA, SEL_RATIO
    else:
        return steps
    steps.append({"kind": "random_resized_crop", "params": {
        "area_range": list(area), "ratio_range": list(ratio), "out_size": [size, size],
    }})
    return steps


def _resize_override(size: int) -> dict:
    return {"attack": {
        "optimization_pipeline": _steps(crop=_CROP, size=size, rrc="optimization"),
        "selection_pipeline": _steps(crop=_CROP, size=size, rrc="selection"),
    }}


def _no_final_selection(base: dict) -> dict:
    return {"attack": {"final_count": base["attack"]["candidates_per_class"]}}


PRESETS = {
    "standard": lambda base: {},
    "ce_loss": lambda base: {"attack": {"loss": "cross_entropy", "learning_rate": 0.01}},
    "no_center_cropping": lambda base: {"attack": {
        "optimization_pipeline": _steps(crop=None, size=NATIVE_SIZE, rrc="optimization"),
        "selection_pipeline": _steps(crop=None, size=NATIVE_SIZE, rrc="selection"),
    }},
    "resize_small": lambda base: _resize_override(17),
    "resize_large": lambda base: _resize_override(32),
    "no_random_cropping": lambda base: {"attack": {
        "optimization_pipeline": _steps(crop=_CROP, size=NATIVE_SIZE, rrc=None),
    }},
    "no_initial_selection": lambda base: {"attack": {"initial_selection_mode": "random"}},
    "no_final_selection": _no_final_selection,
    "discriminator_loss": lambda base: {"attack": {"discriminator_weight": 0.1}},
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def preset_config(base: ExperimentConfig, name: str) -> ExperimentConfig:
    """Apply a named preset to a base config and re-validate the result."""
    if name not in PRESETS:
        valid = ", ".join(sorted(PRESETS))
        raise ConfigError([f"unknown preset {name!r}; valid presets: {valid}"])
    document = _merge(base.to_dict(), PRESETS[name](base.to_dict()))
    return parse_config(document)
