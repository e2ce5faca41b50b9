"""Latent-space inversion attack with transformation-robust selection.

The attack runs in three stages.  Sampling draws input latents, maps them
to the intermediate space with truncation, and keeps the candidates whose
synthesized images already score highest for each target class (evaluated
on the deterministic part of the optimization pipeline, averaged over both
horizontal orientations).  Optimization updates each candidate latent with
Adam against the configured identity loss, measured on a freshly
transformed synthesis every step.  Selection scores every optimized
candidate as the Monte-Carlo mean of the target-class score under the
stronger selection transformations and keeps the top slice; brittle
candidates whose confidence does not survive transformation rank low and
drop out.

Every random draw is addressed by (master_seed, stage, class, candidate),
so per-class results are identical no matter which classes run together
or how candidates are batched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolationError
from .losses import cross_entropy, discriminator_penalty, discriminator_penalty_gradient, poincare_loss
from .models.classifier import classify
from .models.generator import map_latent_batch
from .rng import RngStream, derive_stream_id
from .transforms import (
    TransformPipeline,
    apply_pipeline_batch,
    apply_pipeline_batch_vjp,
    hflip,
)
from .types import SPACE_INPUT, ImageTensor, LatentBatch

LOSS_KINDS = ("poincare", "cross_entropy")
SELECTION_MODES = ("score", "random")

STAGE_SAMPLE = "sample"
STAGE_INIT_RANDOM = "init_random"
STAGE_OPTIMIZE = "optimize"
STAGE_ROBUST = "robust"


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one attack run."""

    master_seed: int
    target_classes: tuple[int, ...]
    optimization_pipeline: TransformPipeline
    selection_pipeline: TransformPipeline
    sample_count: int = 2000
    candidates_per_class: int = 200
    final_count: int = 50
    steps: int = 50
    learning_rate: float = 0.005
    adam_betas: tuple[float, float] = (0.1, 0.1)
    adam_epsilon: float = 1e-8
    truncation_psi: float = 0.5
    truncation_cutoff: int = 8
    loss: str = "poincare"
    discriminator_weight: float = 0.0
    mc_samples: int = 100
    batch_size: int = 20
    initial_selection_mode: str = "score"

    def __post_init__(self):
        problems = []
        if not self.target_classes:
            problems.append("target_classes must be non-empty")
        if len(set(self.target_classes)) != len(self.target_classes):
            problems.append("target_classes contains duplicates")
        if not 0 < self.candidates_per_class <= self.sample_count:
            problems.append("need 0 < candidates_per_class <= sample_count")
        if not 0 < self.final_count <= self.candidates_per_class:
            problems.append("need 0 < final_count <= candidates_per_class")
        if self.steps < 0:
            problems.append("steps must be non-negative")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            problems.append("learning_rate must be positive")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas):
            problems.append("adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            problems.append("adam_epsilon must be positive")
        if not 0.0 <= self.truncation_psi <= 1.0:
            problems.append("truncation_psi must lie in [0, 1]")
        if self.truncation_cutoff < 0:
            problems.append("truncation_cutoff must be non-negative")
        if self.loss not in LOSS_KINDS:
            problems.append(f"loss must be one of {LOSS_KINDS}")
        if self.discriminator_weight < 0:
            problems.append("discriminator_weight must be non-negative")
        if self.mc_samples < 1:
            problems.append("mc_samples must be at least 1")
        if self.batch_size < 1:
            problems.append("batch_size must be at least 1")
        if self.initial_selection_mode not in SELECTION_MODES:
            problems.append(f"initial_selection_mode must be one of {SELECTION_MODES}")
        if problems:
            raise ContractViolationError("; ".join(problems))
        object.__setattr__(self, "target_classes", tuple(int(c) for c in self.target_classes))

    def semantic_dict(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "target_classes": list(self.target_classes),
            "optimization_pipeline": _pipeline_dict(self.optimization_pipeline),
            "selection_pipeline": _pipeline_dict(self.selection_pipeline),
            "sample_count": self.sample_count,
            "candidates_per_class": self.candidates_per_class,
            "final_count": self.final_count,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "adam_epsilon": self.adam_epsilon,
            "truncation_psi": self.truncation_psi,
            "truncation_cutoff": self.truncation_cutoff,
            "loss": self.loss,
            "discriminator_weight": self.discriminator_weight,
            "mc_samples": self.mc_samples,
            "batch_size": self.batch_size,
            "initial_selection_mode": self.initial_selection_mode,
        }

    def hash(self) -> str:
        text = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _pipeline_dict(pipeline: TransformPipeline) -> list[dict]:
    return [{"kind": s.kind, "params": _jsonable(s.params)} for s in pipeline.specs]


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(
    w: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    learning_rate: float,
    betas: tuple[float, float] = (0.1, 0.1),
    epsilon: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns new iterate."""
    if w.shape != grad.shape or w.shape != state.m.shape:
        raise ContractViolationError("Adam shapes disagree")
    b1, b2 = betas
    state.step += 1
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    return w - learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)


@dataclass
class CandidateEntry:
    latent: np.ndarray          # current intermediate latent (d_w,)
    initial_score: float
    batch_index: int            # index into the sampled pool
    optimized: bool = False
    failed: bool = False
    plain_score: float = math.nan
    robust_score: float = math.nan
    selected: bool = False
    loss_trace: np.ndarray | None = None  # (steps, 3): loss, target_score, grad_norm


@dataclass
class CandidatePool:
    """Per-class candidate sets drawn from one shared sample pool."""

    by_class: dict[int, list[CandidateEntry]]
    sample_pool: LatentBatch

    def entries(self, c: int) -> list[CandidateEntry]:
        return self.by_class[c]


@dataclass
class AttackResult:
    by_class: dict[int, list[CandidateEntry]]
    config_hash: str
    master_seed: int

    def selected(self, c: int) -> list[CandidateEntry]:
        return [e for e in self.by_class[c] if e.selected]

    def selected_images(self, gen, c: int) -> np.ndarray:
        latents = np.stack([e.latent for e in self.selected(c)])
        return gen.synthesize_batch(latents)

    def selected_index_sets(self) -> dict[int, tuple[int, ...]]:
        return {
            c: tuple(sorted(e.batch_index for e in entries if e.selected))
            for c, entries in self.by_class.items()
        }


# ---------------------------------------------------------------------------
# Stage 1: sampling and initial selection
# ---------------------------------------------------------------------------


def sample_latents(count: int, dim: int, rng: RngStream) -> LatentBatch:
    """Draw standard normal input latents, one stream tick."""
    if count < 1 or dim < 1:
        raise ContractViolationError("count and dim must be positive")
    return LatentBatch(rng.normal((count, dim)), SPACE_INPUT)


def initial_selection(
    latents: LatentBatch,
    target_classes,
    candidates_per_class: int,
    pipeline: TransformPipeline,
    gen,
    target_model,
    batch_size: int = 256,
) -> CandidatePool:
    """Rank the shared pool per class by flip-averaged prediction score.

    The pipeline must be deterministic at this stage.  The same latent may
    be picked for several classes.  Exact score ties resolve to the lower
    pool index.
    """
    if pipeline.has_random:
        raise ContractViolationError("initial selection requires a deterministic pipeline")
    if not 0 < candidates_per_class <= len(latents):
        raise ContractViolationError("need 0 < candidates_per_class <= pool size")
    classes = [int(c) for c in target_classes]

    chunks = []
    for start in range(0, len(latents), batch_size):
        w = latents.values[start:start + batch_size]
        images = apply_pipeline_batch(pipeline, gen.synthesize_batch(w))
        _, scores = classify(target_model, images)
        _, scores_flipped = classify(target_model, hflip(images))
        chunks.append(0.5 * (scores + scores_flipped))
    mean_scores = np.concatenate(chunks, axis=0)

    by_class = {}
    for c in classes:
        order = np.argsort(-mean_scores[:, c], kind="stable")[:candidates_per_class]
        by_class[c] = [
            CandidateEntry(
                latent=latents.values[i].copy(),
                initial_score=float(mean_scores[i, c]),
                batch_index=int(i),
            )
            for i in order
        ]
    return CandidatePool(by_class=by_class, sample_pool=latents)


def random_initial_selection(
    latents: LatentBatch,
    target_classes,
    candidates_per_class: int,
    master_seed: int,
) -> CandidatePool:
    """Ablation path: pick candidates uniformly from the pool, per class."""
    by_class = {}
    for c in (int(c) for c in target_classes):
        stream = RngStream(master_seed, derive_stream_id(STAGE_INIT_RANDOM, c))
        picks = np.sort(stream.choice(len(latents), size=candidates_per_class, replace=False))
        by_class[c] = [
            CandidateEntry(latent=latents.values[i].copy(), initial_score=math.nan, batch_index=int(i))
            for i in picks
        ]
    return CandidatePool(by_class=by_class, sample_pool=latents)


# ---------------------------------------------------------------------------
# Stage 2: optimization
# ---------------------------------------------------------------------------


def _candidate_losses(logits: np.ndarray, c: int, kind: str):
    """Loss value and logit gradient for every row of a logit matrix."""
    losses = np.empty(logits.shape[0])
    grads = np.empty_like(logits)
    for i, row in enumerate(logits):
        if kind == "poincare":
            res = poincare_loss(row, c)
            losses[i], grads[i] = res.loss, res.grad_o
        else:
            losses[i], grads[i] = cross_entropy(row, c)
    return losses, grads


def optimize_candidates(
    pool: CandidatePool,
    target_class: int,
    gen,
    target_model,
    config: AttackConfig,
    discriminator=None,
) -> None:
    """Run Adam on every candidate of one class, in place.

    Each step synthesizes the current latents, pushes them through the
    optimization pipeline (random crops drawn from per-candidate streams),
    evaluates the configured loss, and pulls the gradient back to latent
    space through the transform and synthesis adjoints.  Candidates whose
    loss turns non-finite are flagged failed and frozen; everything else
    keeps its full loss trace (loss, target score, L1 latent-gradient norm).
    """
    c = int(target_class)
    entries = pool.entries(c)
    if config.discriminator_weight > 0 and discriminator is None:
        raise ContractViolationError("discriminator_weight > 0 but no discriminator given")

    for start in range(0, len(entries), config.batch_size):
        batch = entries[start:start + config.batch_size]
        b = len(batch)
        w = np.stack([e.latent for e in batch])
        state = AdamState(m=np.zeros_like(w), v=np.zeros_like(w))
        streams = [
            RngStream(config.master_seed, derive_stream_id(STAGE_OPTIMIZE, c, start + i))
            for i in range(b)
        ]
        active = np.ones(b, dtype=bool)
        traces = np.full((b, config.steps, 3), np.nan)

        for step in range(config.steps):
            images, cache = gen.synthesize_with_cache(w)
            transformed, pipe_vjp = apply_pipeline_batch_vjp(
                config.optimization_pipeline, images, streams
            )
            logits, model_vjp = _batched_logits_vjp(target_model, transformed)
            scores = _softmax_rows(logits)
            losses, grad_logits = _candidate_losses(logits, c, config.loss)

            g_images = model_vjp(grad_logits)
            g_images = pipe_vjp(g_images)

            if config.discriminator_weight > 0:
                d_logits = discriminator.forward(images)
                for i in range(b):
                    losses[i] += discriminator_penalty(
                        float(d_logits[i]), config.discriminator_weight
                    )
                d_ct = np.array([
                    discriminator_penalty_gradient(float(d), config.discriminator_weight)
                    for d in d_logits
                ])
                g_images = g_images + discriminator.input_gradient(images, d_ct)

            grad_w = gen.synthesis_vjp(cache, g_images)

            finite = np.isfinite(losses) & np.all(np.isfinite(grad_w), axis=1)
            newly_failed = active & ~finite
            active &= finite

            grad_norms = np.abs(grad_w).sum(axis=1)
            alive = active | newly_failed  # already-failed rows keep their NaN tail
            traces[alive, step, 0] = losses[alive]
            traces[alive, step, 1] = scores[alive, c]
            traces[alive, step, 2] = grad_norms[alive]

            if active.any():
                updated = adam_step(
                    w, np.where(active[:, None], grad_w, 0.0), state,
                    config.learning_rate, config.adam_betas, config.adam_epsilon,
                )
                w = np.where(active[:, None], updated, w)
            for i in np.nonzero(newly_failed)[0]:
                traces[i, step:, :] = np.nan

        for i, entry in enumerate(batch):
            entry.latent = w[i].copy()
            entry.optimized = True
            entry.failed = bool(~active[i])
            entry.loss_trace = traces[i]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _batched_logits_vjp(model, images: np.ndarray):
    """Logits plus cotangent pullback for a batch of images."""
    if hasattr(model, "forward_with_vjp"):
        return model.forward_with_vjp(images)
    logits = model.forward(images)
    return logits, lambda go: model.input_gradient(images, go)


# ---------------------------------------------------------------------------
# Stage 3: robust scoring and final selection
# ---------------------------------------------------------------------------


def robust_score(
    x,
    target_class: int,
    target_model,
    selection_pipeline: TransformPipeline,
    mc_samples: int,
    rng: RngStream,
) -> float:
    """Monte-Carlo mean target-class score under the selection transforms.

    Draws `mc_samples` independent transformed versions of `x` and averages
    the target-class softmax score.  Deterministic given the rng state; with
    a transform-free pipeline the result equals the plain score exactly.
    """
    if mc_samples < 1:
        raise ContractViolationError("mc_samples must be at least 1")
    arr = x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractViolationError("robust_score expects a single (H, W, C) image")
    c = int(target_class)

    if not selection_pipeline.has_random:
        transformed = apply_pipeline_batch(selection_pipeline, arr[None])
        _, scores = classify(target_model, transformed)
        return float(scores[0, c])

    batch = np.broadcast_to(arr, (mc_samples,) + arr.shape)
    rngs = [rng] * mc_samples  # sequential draws from the caller's stream
    transformed = apply_pipeline_batch(selection_pipeline, np.ascontiguousarray(batch), rngs)
    _, scores = classify(target_model, transformed)
    return float(scores[:, c].mean())


def final_selection(entries: list[CandidateEntry], final_count: int) -> None:
    """Flag the `final_count` candidates with the highest robust scores.

    Failed candidates are excluded.  Exact ties resolve to the lower
    candidate position.  A shortfall of usable candidates is an error.
    """
    usable = [i for i, e in enumerate(entries) if not e.failed]
    if len(usable) < final_count:
        raise ContractViolationError(
            f"only {len(usable)} usable candidates for final_count={final_count}"
        )
    scores = np.array([entries[i].robust_score for i in usable])
    if not np.all(np.isfinite(scores)):
        raise ContractViolationError("robust scores missing; run robust scoring first")
    order = np.argsort(-scores, kind="stable")[:final_count]
    for e in entries:
        e.selected = False
    for k in order:
        entries[usable[k]].selected = True


# ---------------------------------------------------------------------------
# Full attack
# ---------------------------------------------------------------------------


def run_attack(config: AttackConfig, gen, target_model, discriminator=None) -> AttackResult:
    """Execute sampling, optimization, and robust selection end to end."""
    num_classes = target_model.num_classes
    for c in config.target_classes:
        if not 0 <= c < num_classes:
            raise ContractViolationError(f"target class {c} outside model range")

    sample_stream = RngStream(config.master_seed, derive_stream_id(STAGE_SAMPLE))
    z = sample_latents(config.sample_count, gen.d_z, sample_stream)
    w = map_latent_batch(gen, z, config.truncation_psi, config.truncation_cutoff)

    deterministic = config.optimization_pipeline.deterministic_only()
    if config.initial_selection_mode == "score":
        pool = initial_selection(
            w, config.target_classes, config.candidates_per_class,
            deterministic, gen, target_model,
        )
    else:
        pool = random_initial_selection(
            w, config.target_classes, config.candidates_per_class, config.master_seed
        )

    for c in config.target_classes:
        optimize_candidates(pool, c, gen, target_model, config, discriminator)
        entries = pool.entries(c)
        latents = np.stack([e.latent for e in entries])
        images = gen.synthesize_batch(latents)
        plain = apply_pipeline_batch(deterministic, images)
        _, plain_scores = classify(target_model, plain)
        for i, entry in enumerate(entries):
            entry.plain_score = float(plain_scores[i, c])
            if entry.failed:
                continue
            stream = RngStream(config.master_seed, derive_stream_id(STAGE_ROBUST, c, i))
            entry.robust_score = robust_score(
                images[i], c, target_model, config.selection_pipeline,
                config.mc_samples, stream,
            )
        final_selection(entries, config.final_count)

    return AttackResult(
        by_class={c: pool.entries(c) for c in config.target_classes},
        config_hash=config.hash(),
        master_seed=config.master_seed,
    )
