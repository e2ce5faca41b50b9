"""Experiment configuration: a small JSON document with strict validation.

Every problem found during parsing is collected and reported in a single
ConfigError rather than failing at the first bad key.  Unknown keys are
rejected at every level so typos cannot silently fall back to defaults.
The content hash is computed over the canonical serialization, making it
insensitive to key order, whitespace, and other formatting choices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attack import LOSS_KINDS, SELECTION_MODES
from ..errors import ConfigError
from ..transforms import TransformPipeline, TransformSpec

SCHEMA_VERSION = 1

DEFAULT_ATTACK = {
    "target_classes": None,
    "optimization_pipeline": None,
    "selection_pipeline": None,
    "sample_count": 2000,
    "candidates_per_class": 200,
    "final_count": 50,
    "steps": 50,
    "learning_rate": 0.005,
    "adam_betas": [0.1, 0.1],
    "adam_epsilon": 1e-8,
    "truncation_psi": 0.5,
    "truncation_cutoff": 8,
    "loss": "poincare",
    "discriminator_weight": 0.0,
    "mc_samples": 100,
    "batch_size": 20,
    "initial_selection_mode": "score",
}

DEFAULT_MODELS = {
    "kind": "toy_benchmark",
    "num_classes": 10,
    "n_train": 40,
}

DEFAULT_METRICS = {
    "knn_k": 3,
    "fid_filter": False,
}

DEFAULT_OUTPUT = {
    "save_images": True,
}

_NUMERIC = (int, float)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    models: dict
    attack: dict
    metrics: dict
    output: dict
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "models": dict(self.models),
            "attack": dict(self.attack),
            "metrics": dict(self.metrics),
            "output": dict(self.output),
        }

    def pipeline(self, which: str) -> TransformPipeline | None:
        """Build the configured pipeline, or None when the task default applies."""
        raw = self.attack[f"{which}_pipeline"]
        if raw is None:
            return None
        return TransformPipeline(
            tuple(TransformSpec(step["kind"], dict(step.get("params", {}))) for step in raw)
        )


def _check_unknown(section: dict, allowed, where: str, problems: list):
    for key in section:
        if key not in allowed:
            problems.append(f"{where}: unknown key {key!r}")


def _require_number(value, where: str, problems: list, *, minimum=None, positive=False) -> bool:
    if not isinstance(value, _NUMERIC) or isinstance(value, bool):
        problems.append(f"{where}: expected a number, got {value!r}")
        return False
    if positive and value <= 0:
        problems.append(f"{where}: must be positive, got {value!r}")
        return False
    if minimum is not None and value < minimum:
        problems.append(f"{where}: must be >= {minimum}, got {value!r}")
        return False
    return True


def _require_int(value, where: str, problems: list, *, minimum=None) -> bool:
    if not isinstance(value, int) or isinstance(value, bool):
        problems.append(f"{where}: expected an integer, got {value!r}")
        return False
    if minimum is not None and value < minimum:
        problems.append(f"{where}: must be >= {minimum}, got {value!r}")
        return False
    return True


def _parse_pipeline(raw, where: str, problems: list):
    if raw is None:
        return None
    if not isinstance(raw, list):
        problems.append(f"{where}: expected a list of transform steps")
        return None
    out = []
    for i, step in enumerate(raw):
        spot = f"{where}[{i}]"
        if not isinstance(step, dict):
            problems.append(f"{spot}: expected an object with 'kind'")
            continue
        _check_unknown(step, ("kind", "params"), spot, problems)
        kind = step.get("kind")
        params = step.get("params", {})
        if not isinstance(kind, str):
            problems.append(f"{spot}: 'kind' must be a string")
            continue
        if not isinstance(params, dict):
            problems.append(f"{spot}: 'params' must be an object")
            continue
        try:
            spec = TransformSpec(kind, {k: _listify(v) for k, v in params.items()})
        except ValueError as exc:
            problems.append(f"{spot}: {exc}")
            continue
        out.append({"kind": spec.kind, "params": _plain(spec.params)})
    return out


def _listify(value):
    return tuple(value) if isinstance(value, list) else value


def _plain(obj):
    """JSON-friendly copy: tuples to lists, recursively."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _parse_models(raw, problems: list) -> dict:
    models = dict(DEFAULT_MODELS)
    if not isinstance(raw, dict):
        problems.append("models: expected an object")
        return models
    kind = raw.get("kind", "toy_benchmark")
    if kind == "toy_benchmark":
        allowed = ("kind", "num_classes", "n_train")
        _check_unknown(raw, allowed, "models", problems)
        models["kind"] = "toy_benchmark"
        for key, minimum in (("num_classes", 2), ("n_train", 2)):
            if key in raw and _require_int(raw[key], f"models.{key}", problems, minimum=minimum):
                models[key] = raw[key]
    elif kind == "files":
        allowed = ("kind", "generator", "target", "eval", "aux")
        _check_unknown(raw, allowed, "models", problems)
        models = {"kind": "files"}
        for key in ("generator", "target", "eval", "aux"):
            if key not in raw:
                problems.append(f"models.{key}: required for kind 'files'")
            elif not isinstance(raw[key], str):
                problems.append(f"models.{key}: expected a path string")
            else:
                models[key] = raw[key]
    else:
        problems.append(f"models.kind: unknown kind {kind!r}")
    return models


def _parse_attack(raw, problems: list) -> dict:
    attack = {k: (list(v) if isinstance(v, list) else v) for k, v in DEFAULT_ATTACK.items()}
    if not isinstance(raw, dict):
        problems.append("attack: expected an object")
        return attack
    _check_unknown(raw, tuple(DEFAULT_ATTACK), "attack", problems)

    int_fields = {
        "sample_count": 1, "candidates_per_class": 1, "final_count": 1,
        "steps": 0, "truncation_cutoff": 0, "mc_samples": 1, "batch_size": 1,
    }
    for key, minimum in int_fields.items():
        if key in raw and _require_int(raw[key], f"attack.{key}", problems, minimum=minimum):
            attack[key] = raw[key]
    for key in ("learning_rate", "adam_epsilon"):
        if key in raw and _require_number(raw[key], f"attack.{key}", problems, positive=True):
            attack[key] = float(raw[key])
    for key in ("truncation_psi", "discriminator_weight"):
        if key in raw and _require_number(raw[key], f"attack.{key}", problems, minimum=0.0):
            attack[key] = float(raw[key])

    if "adam_betas" in raw:
        betas = raw["adam_betas"]
        if (isinstance(betas, list) and len(betas) == 2
                and all(isinstance(b, _NUMERIC) and not isinstance(b, bool) for b in betas)
                and all(0.0 <= b < 1.0 for b in betas)):
            attack["adam_betas"] = [float(b) for b in betas]
        else:
            problems.append(f"attack.adam_betas: expected two numbers in [0, 1), got {betas!r}")
    if "loss" in raw:
        if raw["loss"] in LOSS_KINDS:
            attack["loss"] = raw["loss"]
        else:
            problems.append(f"attack.loss: expected one of {sorted(LOSS_KINDS)}, got {raw['loss']!r}")
    if "initial_selection_mode" in raw:
        if raw["initial_selection_mode"] in SELECTION_MODES:
            attack["initial_selection_mode"] = raw["initial_selection_mode"]
        else:
            problems.append(
                "attack.initial_selection_mode: expected one of "
                f"{sorted(SELECTION_MODES)}, got {raw['initial_selection_mode']!r}"
            )
    if "target_classes" in raw:
        classes = raw["target_classes"]
        if classes is None:
            attack["target_classes"] = None
        elif (isinstance(classes, list) and classes
                and all(isinstance(c, int) and not isinstance(c, bool) and c >= 0 for c in classes)
                and len(set(classes)) == len(classes)):
            attack["target_classes"] = list(classes)
        else:
            problems.append(
                f"attack.target_classes: expected distinct non-negative integers, got {classes!r}"
            )
    for which in ("optimization_pipeline", "selection_pipeline"):
        if which in raw:
            attack[which] = _parse_pipeline(raw[which], f"attack.{which}", problems)
    return attack


def _parse_metrics(raw, problems: list) -> dict:
    metrics = dict(DEFAULT_METRICS)
    if not isinstance(raw, dict):
        problems.append("metrics: expected an object")
        return metrics
    _check_unknown(raw, tuple(DEFAULT_METRICS), "metrics", problems)
    if "knn_k" in raw and _require_int(raw["knn_k"], "metrics.knn_k", problems, minimum=1):
        metrics["knn_k"] = raw["knn_k"]
    if "fid_filter" in raw:
        if isinstance(raw["fid_filter"], bool):
            metrics["fid_filter"] = raw["fid_filter"]
        else:
            problems.append(f"metrics.fid_filter: expected a boolean, got {raw['fid_filter']!r}")
    return metrics


def _parse_output(raw, problems: list) -> dict:
    output = dict(DEFAULT_OUTPUT)
    if not isinstance(raw, dict):
        problems.append("output: expected an object")
        return output
    _check_unknown(raw, tuple(DEFAULT_OUTPUT), "output", problems)
    if "save_images" in raw:
        if isinstance(raw["save_images"], bool):
            output["save_images"] = raw["save_images"]
        else:
            problems.append(f"output.save_images: expected a boolean, got {raw['save_images']!r}")
    return output


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a config document, applying defaults for omitted sections."""
    problems: list[str] = []
    if not isinstance(document, dict):
        raise ConfigError(["top level: expected a JSON object"])
    _check_unknown(
        document,
        ("schema_version", "seed", "models", "attack", "metrics", "output"),
        "top level",
        problems,
    )

    version = document.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        problems.append(f"schema_version: this build understands {SCHEMA_VERSION}, got {version!r}")

    if "seed" not in document:
        problems.append("seed: required")
        seed = 0
    elif not _require_int(document.get("seed"), "seed", problems, minimum=0):
        seed = 0
    else:
        seed = document["seed"]

    models = _parse_models(document.get("models", {}), problems)
    attack = _parse_attack(document.get("attack", {}), problems)
    metrics = _parse_metrics(document.get("metrics", {}), problems)
    output = _parse_output(document.get("output", {}), problems)

    if attack["final_count"] > attack["candidates_per_class"]:
        problems.append(
            "attack.final_count: cannot exceed attack.candidates_per_class "
            f"({attack['final_count']} > {attack['candidates_per_class']})"
        )

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        seed=seed, models=models, attack=attack, metrics=metrics, output=output,
        schema_version=SCHEMA_VERSION,
    )


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return parse_config(document)


def canonical_json(config: ExperimentConfig) -> str:
    """Deterministic serialization: sorted keys, no insignificant whitespace."""
    return json.dumps(_plain(config.to_dict()), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()
