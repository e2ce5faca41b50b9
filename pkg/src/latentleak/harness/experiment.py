"""Experiment orchestration: run attacks, score them, persist everything.

A run directory is self-describing: the exact config, the metric report in
CSV and JSON, per-step loss traces, the selected pool indices, feature
matrices for metrics-only reruns, selected images as PNGs with per-class
grids, and a manifest listing every artifact with its content hash.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..attack import (
    STAGE_SAMPLE,
    AttackConfig,
    AttackResult,
    CandidateEntry,
    CandidatePool,
    initial_selection,
    optimize_candidates,
    run_attack,
    sample_latents,
)
from ..benchmark import build_benchmark
from ..errors import ConfigError, ContractViolationError, DegenerateInputError
from ..metrics import (
    _REPORT_COLUMNS,
    FeatureMatrix,
    MetricsReport,
    attack_accuracy,
    check_distinct_models,
    density_coverage,
    feature_distance,
    fid,
    precision_recall,
)
from ..models.classifier import classify
from ..models.generator import map_latent_batch
from ..models.io import load_model
from ..rng import RngStream, derive_stream_id
from ..transforms import TransformPipeline, apply_pipeline_batch
from .config import ExperimentConfig, config_hash
from .images import image_grid, save_png
from .presets import PRESETS, preset_config

_METRIC_ERRORS = (ContractViolationError, DegenerateInputError)


@dataclass
class RunContext:
    """Resolved models and pipelines for one experiment."""

    generator: object
    target_model: object
    eval_model: object
    aux_features: object
    discriminator: object
    train_images: dict
    optimization_pipeline: TransformPipeline
    selection_pipeline: TransformPipeline

    @property
    def num_classes(self) -> int:
        return self.target_model.num_classes


def build_context(config: ExperimentConfig) -> RunContext:
    models = config.models
    opt_override = config.pipeline("optimization")
    sel_override = config.pipeline("selection")
    if models["kind"] == "toy_benchmark":
        bench = build_benchmark(
            num_classes=models["num_classes"], seed=config.seed, n_train=models["n_train"]
        )
        return RunContext(
            generator=bench.generator,
            target_model=bench.target_model,
            eval_model=bench.eval_model,
            aux_features=bench.aux_features,
            discriminator=bench.discriminator,
            train_images=bench.train_images,
            optimization_pipeline=opt_override or bench.optimization_pipeline,
            selection_pipeline=sel_override or bench.selection_pipeline,
        )
    # model files on disk; pipelines must then be spelled out in the config
    problems = [
        f"attack.{name}: required when models come from files"
        for name, value in (
            ("optimization_pipeline", opt_override), ("selection_pipeline", sel_override),
        )
        if value is None
    ]
    if problems:
        raise ConfigError(problems)
    return RunContext(
        generator=load_model(models["generator"]),
        target_model=load_model(models["target"]),
        eval_model=load_model(models["eval"]),
        aux_features=load_model(models["aux"]),
        discriminator=None,
        train_images={},
        optimization_pipeline=opt_override,
        selection_pipeline=sel_override,
    )


def build_attack_config(
    config: ExperimentConfig, ctx: RunContext, **overrides
) -> AttackConfig:
    a = dict(config.attack)
    a.update(overrides)
    classes = a["target_classes"]
    if classes is None:
        classes = range(ctx.num_classes)
    return AttackConfig(
        master_seed=config.seed,
        target_classes=tuple(classes),
        optimization_pipeline=ctx.optimization_pipeline,
        selection_pipeline=ctx.selection_pipeline,
        sample_count=a["sample_count"],
        candidates_per_class=a["candidates_per_class"],
        final_count=a["final_count"],
        steps=a["steps"],
        learning_rate=a["learning_rate"],
        adam_betas=tuple(a["adam_betas"]),
        adam_epsilon=a["adam_epsilon"],
        truncation_psi=a["truncation_psi"],
        truncation_cutoff=a["truncation_cutoff"],
        loss=a["loss"],
        discriminator_weight=a["discriminator_weight"],
        mc_samples=a["mc_samples"],
        batch_size=a["batch_size"],
        initial_selection_mode=a["initial_selection_mode"],
    )


# ---------------------------------------------------------------------------
# Metrics assembly
# ---------------------------------------------------------------------------


def compute_metrics(config: ExperimentConfig, ctx: RunContext, result: AttackResult):
    """Score an attack result; returns the report and the feature matrices.

    Feature matrices (evaluation-model and auxiliary spaces, training and
    generated sides per class) back the report's distributional metrics and
    are returned for persistence so they can be recomputed from disk.
    """
    check_distinct_models(ctx.target_model, ctx.eval_model)
    eval_pipe = ctx.optimization_pipeline.deterministic_only()
    pipe_arg = eval_pipe if len(eval_pipe) else None
    k = config.metrics["knn_k"]
    notes = [f"knn_k={k}"]

    acc = attack_accuracy(result, ctx.eval_model, gen=ctx.generator, pipeline=pipe_arg)
    if "note" in acc:
        notes.append(acc["note"])
    per_class = {c: dict(vals) for c, vals in acc["per_class"].items()}
    aggregate = {"acc_at_1": acc["acc_at_1"], "acc_at_5": acc["acc_at_5"]}

    def adapt(images):
        return apply_pipeline_batch(eval_pipe, images) if len(eval_pipe) else images

    eval_fm = ctx.eval_model.feature_map
    aux_fm = ctx.aux_features
    features: dict[str, FeatureMatrix] = {}
    counts = []
    for c in sorted(result.by_class):
        images = adapt(result.selected_images(ctx.generator, c))
        features[f"eval_generated_{c}"] = FeatureMatrix(
            eval_fm.features(images), source_tag=f"eval-generated-class-{c}"
        )
        features[f"aux_generated_{c}"] = FeatureMatrix(
            aux_fm.features(images), source_tag=f"aux-generated-class-{c}"
        )
        counts.append(len(images))
    notes.append(f"selected_counts={','.join(str(n) for n in counts)}")

    if not ctx.train_images:
        notes.append("no training images available; distributional metrics skipped")
        return MetricsReport(aggregate, per_class, notes), features

    train_eval = {c: eval_fm.features(imgs) for c, imgs in ctx.train_images.items()}
    train_aux = {c: aux_fm.features(imgs) for c, imgs in ctx.train_images.items()}
    for c in sorted(result.by_class):
        features[f"eval_train_{c}"] = FeatureMatrix(
            train_eval[c], source_tag=f"eval-train-class-{c}"
        )
        features[f"aux_train_{c}"] = FeatureMatrix(train_aux[c], source_tag=f"aux-train-class-{c}")

    d_eval = feature_distance(
        result, train_eval, lambda x: eval_fm.features(adapt(x)), gen=ctx.generator
    )
    d_aux = feature_distance(
        result, train_aux, lambda x: aux_fm.features(adapt(x)), gen=ctx.generator
    )
    aggregate["delta_eval"] = d_eval["mean"]
    aggregate["delta_aux"] = d_aux["mean"]
    for c in per_class:
        per_class[c]["delta_eval"] = d_eval["per_class"][c]
        per_class[c]["delta_aux"] = d_aux["per_class"][c]

    def distribution_block(real_rows, fake_rows, fid_rows, label, into: dict):
        try:
            into["fid"] = fid(real_rows, fid_rows)
        except _METRIC_ERRORS as exc:
            notes.append(f"{label}: fid skipped ({exc})")
        try:
            into["precision"], into["recall"] = precision_recall(real_rows, fake_rows, k=k)
            into["density"], into["coverage"] = density_coverage(real_rows, fake_rows, k=k)
        except _METRIC_ERRORS as exc:
            notes.append(f"{label}: knn metrics skipped ({exc})")

    # the FID filter keeps only samples the evaluation model assigns to the
    # target class; the knn metrics always see the full selected set
    fid_filter = config.metrics["fid_filter"]
    fid_rows_by_class: dict[int, np.ndarray] = {}
    for c in sorted(result.by_class):
        rows = features[f"aux_generated_{c}"].rows
        if fid_filter:
            logits, _ = classify(ctx.eval_model, adapt(result.selected_images(ctx.generator, c)))
            keep = np.argmax(logits, axis=-1) == c
            if keep.sum() < len(keep):
                notes.append(f"class {c}: fid restricted to {int(keep.sum())}/{len(keep)} samples")
            rows = rows[keep]
        fid_rows_by_class[c] = rows
        block: dict = {}
        distribution_block(
            train_aux[c], features[f"aux_generated_{c}"].rows, rows, f"class {c}", block
        )
        per_class[c].update(block)

    all_real = np.concatenate([train_aux[c] for c in sorted(result.by_class)])
    all_fake = np.concatenate(
        [features[f"aux_generated_{c}"].rows for c in sorted(result.by_class)]
    )
    all_fid = np.concatenate([fid_rows_by_class[c] for c in sorted(result.by_class)])
    agg_block: dict = {}
    distribution_block(all_real, all_fake, all_fid, "aggregate", agg_block)
    aggregate.update(agg_block)

    return MetricsReport(aggregate, per_class, notes), features


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _loss_trace_csv(result: AttackResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "candidate", "step", "loss", "target_score", "grad_norm"])
    for c in sorted(result.by_class):
        for entry in result.by_class[c]:
            trace = entry.loss_trace
            if trace is None:
                continue
            for step in range(trace.shape[0]):
                writer.writerow(
                    [c, entry.batch_index, step]
                    + [repr(float(v)) for v in trace[step]]
                )
    return buf.getvalue()


def _write_run_dir(out: Path, config, result, report, features):
    artifacts: list[Path] = []

    def emit(rel: str, text: str | bytes):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            path.write_text(text)
        artifacts.append(path)

    emit("config.json", json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    report.save(out / "report.csv", out / "report.json")
    artifacts += [out / "report.csv", out / "report.json"]
    emit("loss_traces.csv", _loss_trace_csv(result))
    emit(
        "selection.json",
        json.dumps(
            {str(c): list(idx) for c, idx in sorted(result.selected_index_sets().items())},
            indent=1,
        ) + "\n",
    )
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    for name in sorted(features):
        path = feat_dir / f"{name}.fm"
        features[name].save(path)
        artifacts.append(path)
    return artifacts


def _write_images(out: Path, ctx: RunContext, result: AttackResult):
    artifacts: list[Path] = []
    captions: dict[str, list[float]] = {}
    for c in sorted(result.by_class):
        entries = sorted(result.selected(c), key=lambda e: -e.robust_score)
        images = ctx.generator.synthesize_batch(np.stack([e.latent for e in entries]))
        class_dir = out / "images" / f"class_{c:03d}"
        class_dir.mkdir(parents=True, exist_ok=True)
        for rank, image in enumerate(images):
            path = class_dir / f"rank_{rank:03d}.png"
            save_png(path, image)
            artifacts.append(path)
        grid_path = out / "images" / f"grid_class_{c:03d}.png"
        save_png(grid_path, image_grid(images, columns=10))
        artifacts.append(grid_path)
        captions[str(c)] = [float(e.robust_score) for e in entries]
    return artifacts, captions


def run_experiment(config: ExperimentConfig, out_dir) -> tuple[AttackResult, MetricsReport]:
    """Run the configured attack, score it, and persist the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "status": "running",
        "failures": [],
        "files": {},
    }
    artifacts: list[Path] = []
    captions: dict = {}
    try:
        stage = "build_models"
        ctx = build_context(config)
        stage = "attack"
        attack_cfg = build_attack_config(config, ctx)
        discriminator = ctx.discriminator if attack_cfg.discriminator_weight > 0 else None
        result = run_attack(attack_cfg, ctx.generator, ctx.target_model, discriminator)
        stage = "metrics"
        report, features = compute_metrics(config, ctx, result)
        stage = "persist"
        artifacts = _write_run_dir(out, config, result, report, features)
        if config.output["save_images"]:
            image_files, captions = _write_images(out, ctx, result)
            artifacts += image_files
        manifest["status"] = "complete"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["failures"].append(f"{stage}: {exc}")
        manifest["files"] = {
            str(p.relative_to(out)): _sha256(p) for p in artifacts if p.exists()
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        raise
    manifest["grid_captions"] = captions
    manifest["files"] = {str(p.relative_to(out)): _sha256(p) for p in artifacts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return result, report


def verify_manifest(run_dir) -> list[str]:
    """Recompute artifact hashes against the manifest; returns mismatches."""
    run = Path(run_dir)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        return [f"missing manifest: {manifest_path}"]
    manifest = json.loads(manifest_path.read_text())
    problems = []
    for rel, expected in sorted(manifest.get("files", {}).items()):
        path = run / rel
        if not path.exists():
            problems.append(f"missing file: {rel}")
        elif _sha256(path) != expected:
            problems.append(f"hash mismatch: {rel}")
    return problems


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def run_ablation(base_config: ExperimentConfig, preset_names, out_dir) -> dict[str, MetricsReport]:
    """One run per preset with the shared seed, plus a comparative table."""
    names = list(preset_names)
    unknown = [n for n in names if n not in PRESETS]
    if unknown:
        valid = ", ".join(sorted(PRESETS))
        raise ConfigError([f"unknown preset {n!r}; valid presets: {valid}" for n in unknown])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[str, MetricsReport] = {}
    for name in names:
        cfg = preset_config(base_config, name)
        _, report = run_experiment(cfg, out / name)
        reports[name] = report

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["preset"] + list(_REPORT_COLUMNS[1:]))
    for name in names:
        agg = reports[name].aggregate
        writer.writerow(
            [name]
            + ["" if agg.get(col) is None else repr(float(agg[col])) for col in _REPORT_COLUMNS[1:]]
        )
    (out / "ablation.csv").write_text(buf.getvalue())
    return reports


# ---------------------------------------------------------------------------
# Gradient diagnostic
# ---------------------------------------------------------------------------


def gradient_diagnostic(config: ExperimentConfig, out_dir) -> dict[str, dict[str, list[float]]]:
    """Optimize the same candidates under both losses and record the curves.

    One candidate per class (the initial-selection winner) is optimized
    with a deterministic pipeline under each loss, identical seeds.  The
    per-step mean target score and the mean latent gradient norm, rescaled
    by its first-step value, go to diagnostic.csv.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = build_context(config)
    base = build_attack_config(config, ctx, candidates_per_class=1, final_count=1)
    if base.steps < 1:
        raise ConfigError(["attack.steps: gradient diagnostic needs at least one step"])
    det = ctx.optimization_pipeline.deterministic_only()

    stream = RngStream(base.master_seed, derive_stream_id(STAGE_SAMPLE))
    z = sample_latents(base.sample_count, ctx.generator.d_z, stream)
    w = map_latent_batch(ctx.generator, z, base.truncation_psi, base.truncation_cutoff)
    pool = initial_selection(w, base.target_classes, 1, det, ctx.generator, ctx.target_model)

    curves: dict[str, dict[str, list[float]]] = {}
    for kind in ("poincare", "cross_entropy"):
        run_pool = CandidatePool(
            by_class={
                c: [
                    CandidateEntry(
                        latent=e.latent.copy(),
                        initial_score=e.initial_score,
                        batch_index=e.batch_index,
                    )
                    for e in pool.entries(c)
                ]
                for c in base.target_classes
            },
            sample_pool=pool.sample_pool,
        )
        cfg = replace(base, loss=kind, optimization_pipeline=det)
        for c in base.target_classes:
            optimize_candidates(run_pool, c, ctx.generator, ctx.target_model, cfg)
        traces = np.stack(
            [run_pool.entries(c)[0].loss_trace for c in base.target_classes]
        )  # (classes, steps, 3)
        mean_score = traces[:, :, 1].mean(axis=0)
        mean_norm = traces[:, :, 2].mean(axis=0)
        if mean_norm[0] == 0:
            raise DegenerateInputError("first-step gradient norm is zero; cannot normalize")
        curves[kind] = {
            "score": [float(v) for v in mean_score],
            "normalized_norm": [float(v) for v in mean_norm / mean_norm[0]],
        }

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["loss_kind", "step", "mean_target_score", "normalized_grad_norm"])
    for kind in ("poincare", "cross_entropy"):
        for step, (score, norm) in enumerate(
            zip(curves[kind]["score"], curves[kind]["normalized_norm"])
        ):
            writer.writerow([kind, step, repr(score), repr(norm)])
    (out / "diagnostic.csv").write_text(buf.getvalue())
    return curves
