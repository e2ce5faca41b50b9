"""Self-contained toy inversion task, solvable without any training.

The task wires together the procedural blob prior and two prototype
classifiers.  Class identities are blob configurations that the prior can
reach: class-defining latents are drawn from the same truncated
distribution the attack samples from, spread out greedily so classes stay
separable.  Training images render those configurations tightly (content
box only, parameter jitter, mild pixel noise); the prior itself always
draws a frame around its canvas that no training image contains, which
gives the transformation pipeline a real covariate shift to absorb.

Target and evaluation classifiers share the training images and nothing
else: separately drawn feature mixes, different feature widths, separately
calibrated sharpness.  A third, independent pooled feature map stands in
for an externally trained feature extractor and backs FID, precision/
recall, density/coverage, and the auxiliary feature distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AdamState, AttackConfig, _softmax_rows, adam_step
from .errors import ContractViolationError, DegenerateInputError
from .models.classifier import PooledFeatureMap, PrototypeClassifier, classify
from .models.discriminator import SmoothnessDiscriminator
from .models.generator import PARAMS_PER_BLOB, BlobGenerator, truncate_latents
from .rng import RngStream, derive_stream_id
from .transforms import (
    TransformPipeline,
    TransformSpec,
    _crop_resize_fwd,
    apply_pipeline_batch,
    draw_crop_params,
)

#: pipeline defaults, expressed relative to the generator geometry
CROP_FRACTION = 26 / 36     # center crop retains a 1 px sliver of the frame
NATIVE_SIZE = 24            # classifier input edge
OPT_AREA = (0.9, 1.0)       # optimization-time random crop: gentle, square
OPT_RATIO = (1.0, 1.0)
SEL_AREA = (0.5, 0.9)       # selection-time random crop: stronger, free ratio
SEL_RATIO = (0.8, 1.2)


@dataclass
class ToyBenchmark:
    generator: BlobGenerator
    target_model: PrototypeClassifier
    eval_model: PrototypeClassifier
    aux_features: PooledFeatureMap
    discriminator: SmoothnessDiscriminator
    train_images: dict[int, np.ndarray]       # class -> (n_train, 24, 24, 3)
    class_latents: np.ndarray                 # (num_classes, d_w)
    optimization_pipeline: TransformPipeline
    selection_pipeline: TransformPipeline
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.target_model.num_classes

    @property
    def eval_pipeline(self) -> TransformPipeline:
        """Deterministic adaptation used when feeding results to a model."""
        return self.optimization_pipeline.deterministic_only()

    def train_features(self, feature_map) -> dict[int, np.ndarray]:
        return {c: feature_map.features(imgs) for c, imgs in self.train_images.items()}


def default_pipelines(canvas_size: int, native_size: int = NATIVE_SIZE):
    crop = round(canvas_size * CROP_FRACTION)
    optimization = TransformPipeline((
        TransformSpec("center_crop", {"size": crop}),
        TransformSpec("resize", {"size": native_size}),
        TransformSpec("random_resized_crop", {
            "area_range": OPT_AREA, "ratio_range": OPT_RATIO, "out_size": native_size,
        }),
    ))
    selection = TransformPipeline((
        TransformSpec("center_crop", {"size": crop}),
        TransformSpec("resize", {"size": native_size}),
        TransformSpec("random_resized_crop", {
            "area_range": SEL_AREA, "ratio_range": SEL_RATIO, "out_size": native_size,
        }),
    ))
    return optimization, selection


def _descriptors(gen: BlobGenerator, w: np.ndarray) -> np.ndarray:
    """Perceptual coordinates of rendered blobs: position, color, size."""
    params = gen.blob_params(w)
    n = w.shape[0]
    return np.concatenate(
        [
            3.0 * params["cx"],
            3.0 * params["cy"],
            1.5 * params["color"].reshape(n, -1),
            2.0 * params["sigma"],
        ],
        axis=1,
    )


def _spread_class_latents(
    gen: BlobGenerator, rng: RngStream, num_classes: int, pool: int, psi: float
) -> np.ndarray:
    """Class-defining latents as k-means medoids of the sampling distribution.

    Candidates come from the truncated sampling distribution and clusters
    are formed on rendered blob descriptors (position, color, size), which
    is what the classifiers actually see.  Medoids keep every class inside
    a dense, reachable region of the attack's own latent pool while k-means
    keeps them mutually separated.
    """
    z = rng.normal((pool, gen.d_z))
    w = truncate_latents(gen.map(z), gen.mean_latent, psi, cutoff=gen.d_w)
    desc = _descriptors(gen, w)

    # k-means++ seeding
    centers = [desc[int(rng.integers(0, pool))]]
    d2 = np.full(pool, np.inf)
    for _ in range(num_classes - 1):
        delta = desc - centers[-1]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", delta, delta))
        probs = d2 / d2.sum()
        centers.append(desc[int(rng.choice(pool, p=probs))])
    centers = np.stack(centers)

    for _ in range(20):
        dists = ((desc[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        for j in range(num_classes):
            members = desc[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)

    dists = ((desc[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    medoids = dists.argmin(axis=0)
    return w[medoids]


def build_benchmark(
    num_classes: int = 10,
    seed: int = 0,
    n_train: int = 40,
    d_z: int = 10,
    d_w: int = 8,
    n_blobs: int = 1,
    canvas_size: int = 36,
    margin_width: int = 6,
    jitter: float = 0.3,
    pixel_noise: float = 0.02,
    target_margin: float = 60.0,
    eval_margin: float = 18.0,
    health_score: float = 0.8,
    max_attempts: int = 25,
) -> ToyBenchmark:
    """Construct the full toy task from a single seed.

    The builder retries the class selection until the task is well posed:
    every class-defining configuration, rendered by the generator and run
    through the deterministic crop/resize adaptation, must be classified
    correctly with score >= health_score by both classifiers.  The retry
    loop is deterministic given the seed.
    """
    if num_classes < 2:
        raise ContractViolationError("need at least 2 classes")
    root = RngStream(seed, derive_stream_id("toy-benchmark"))

    gen = BlobGenerator.random(
        root.substream("generator"),
        d_z=d_z, d_w=d_w, n_blobs=n_blobs,
        canvas_size=canvas_size, margin_width=margin_width,
    )
    optimization, selection = default_pipelines(canvas_size)
    eval_pipe = optimization.deterministic_only()

    class_rng = root.substream("classes")
    train_rng = root.substream("train")
    # moderate mixing gain keeps the tanh features mostly shape-driven, so
    # the two independently drawn classifiers agree on what a class looks like
    target_fm = PooledFeatureMap.random(
        root.substream("target-features"), feature_dim=24, native_size=NATIVE_SIZE, gain=1.5
    )
    eval_fm = PooledFeatureMap.random(
        root.substream("eval-features"), feature_dim=20, native_size=NATIVE_SIZE, gain=1.5
    )
    aux = PooledFeatureMap.random(
        root.substream("aux-features"), feature_dim=14, native_size=NATIVE_SIZE
    )

    def make_task(latents: np.ndarray):
        """Train images and both classifiers for a given class-latent set."""
        raw_all = latents @ gen.style_weight.T + gen.style_bias
        train = {}
        for c in range(len(latents)):
            raw = raw_all[c] + jitter * train_rng.normal((n_train, raw_all.shape[1]))
            imgs = gen.render_tight(raw, NATIVE_SIZE)
            noise = pixel_noise * train_rng.normal(imgs.shape)
            train[c] = np.clip(imgs + noise, -1.0, 1.0)
        images_list = [train[c] for c in range(len(latents))]
        target = PrototypeClassifier.from_examples(
            target_fm, images_list, margin_target=target_margin
        )
        evaluator = PrototypeClassifier.from_examples(
            eval_fm, images_list, margin_target=eval_margin
        )
        return train, target, evaluator

    def health(latents: np.ndarray, target, evaluator) -> np.ndarray:
        """Per-class worst own-score (both models) on adapted prior renders;
        negative when the top-1 prediction is wrong."""
        adapted = apply_pipeline_batch(eval_pipe, gen.synthesize_batch(latents))
        idx = np.arange(len(latents))
        worst = np.full(len(latents), np.inf)
        for model in (target, evaluator):
            _, scores = classify(model, adapted)
            own = np.where(scores.argmax(axis=1) == idx, scores[idx, idx], -1.0)
            worst = np.minimum(worst, own)
        return worst

    extra = max(4, num_classes // 2)
    last_problem = ""
    for _ in range(max_attempts):
        candidates = _spread_class_latents(
            gen, class_rng, num_classes + extra,
            pool=max(40 * (num_classes + extra), 400), psi=0.5,
        )
        try:
            _, target_all, eval_all = make_task(candidates)
            ranking = health(candidates, target_all, eval_all)
            keep = np.sort(np.argsort(-ranking, kind="stable")[:num_classes])
            class_latents = candidates[keep]
            train_images, target_model, eval_model = make_task(class_latents)
        except (ContractViolationError, DegenerateInputError) as exc:
            last_problem = str(exc)
            continue

        final = health(class_latents, target_model, eval_model)
        if final.min() < health_score:
            last_problem = f"class render scores {np.round(final, 3).tolist()}"
            continue

        return ToyBenchmark(
            generator=gen,
            target_model=target_model,
            eval_model=eval_model,
            aux_features=aux,
            discriminator=SmoothnessDiscriminator(),
            train_images=train_images,
            class_latents=class_latents,
            optimization_pipeline=optimization,
            selection_pipeline=selection,
            seed=seed,
        )
    raise DegenerateInputError(
        f"could not build a well-posed task in {max_attempts} attempts ({last_problem})"
    )


def default_attack_config(bench: ToyBenchmark, master_seed: int, **overrides) -> AttackConfig:
    """Attack configuration with the standard hyperparameters for the toy task."""
    params = dict(
        master_seed=master_seed,
        target_classes=tuple(range(bench.num_classes)),
        optimization_pipeline=bench.optimization_pipeline,
        selection_pipeline=bench.selection_pipeline,
        sample_count=2000,
        candidates_per_class=200,
        final_count=50,
        steps=50,
        learning_rate=0.005,
        adam_betas=(0.1, 0.1),
        adam_epsilon=1e-8,
        truncation_psi=0.5,
        truncation_cutoff=8,
        loss="poincare",
        discriminator_weight=0.0,
        mc_samples=100,
        batch_size=20,
    )
    params.update(overrides)
    return AttackConfig(**params)


# ---------------------------------------------------------------------------
# Planted fooling inputs
# ---------------------------------------------------------------------------


def _prototype_block_image(model: PrototypeClassifier, target_class: int) -> np.ndarray:
    """Block-constant image whose pooled features reproduce a class prototype."""
    fm = model.feature_map
    proto = np.clip(model.prototypes[int(target_class)], -0.999, 0.999)
    pre_target = np.arctanh(proto) - fm.mix_bias
    pooled, *_ = np.linalg.lstsq(fm.mix_weight, pre_target, rcond=None)
    pooled = np.clip(pooled, -0.95, 0.95)
    block = fm.native_size // fm.grid
    base = pooled.reshape(fm.grid, fm.grid, fm.channels)
    return np.repeat(np.repeat(base, block, axis=0), block, axis=1)


def _apply_crops(x: np.ndarray, draws: list[tuple[int, int, int, int]], out: int):
    """Crop-and-resize `x` once per draw; returns stacked outputs and vjps."""
    ys, vjps = [], []
    for i0, j0, hp, wp in draws:
        y, v = _crop_resize_fwd(x, i0, j0, hp, wp, (out, out))
        ys.append(y)
        vjps.append(v)
    return np.stack(ys), vjps


def _verification_crops(n: int) -> list[tuple[int, int, int, int]]:
    """Every square crop at >= 8% area reduction, plus full-width strips."""
    draws = []
    smin = -(-n * 5 // 8)  # widest family any selection pipeline draws from
    for s in range(smin, n):
        if s * s > 0.92 * n * n:
            continue
        for i0 in range(n - s + 1):
            for j0 in range(n - s + 1):
                draws.append((i0, j0, s, s))
    for s in range(smin, n):
        if s * n > 0.92 * n * n:
            continue
        for o in range(n - s + 1):
            draws.append((o, 0, s, n))
            draws.append((0, o, n, s))
    return draws


def plant_brittle_input(
    model: PrototypeClassifier,
    target_class: int,
    rng: RngStream,
    steps: int = 250,
    learning_rate: float = 0.05,
    rounds: int = 5,
    plain_floor: float = 0.995,
    crop_ceiling: float = 0.05,
) -> np.ndarray:
    """Construct an input whose high confidence does not survive cropping.

    Block pooling only sees per-block means, so most pixel directions are
    invisible to the untransformed forward pass; any crop plus resize
    shifts the pooling grid and exposes them.  Starting from a block
    pattern that matches the class prototype, Adam ascent keeps the plain
    target score above `plain_floor` while pushing the score under a
    family of crop transforms below `crop_ceiling`.  After each round the
    candidate is re-checked against every square crop offset, full-width
    strips, and fresh rectangular draws; surviving crops join the training
    family.  Raises DegenerateInputError if the family cannot be defeated.
    """
    c = int(target_class)
    n, _, ch = model.input_shape
    if model.input_shape[1] != n:
        raise ContractViolationError("brittle planting expects a square input")

    check = _verification_crops(n)
    check += [
        draw_crop_params((n, n), SEL_AREA, SEL_RATIO, rng)
        for _ in range(200)
    ]
    check = sorted(set(check))

    # training family: a spread of square crops plus sampled rectangles
    draws = set()
    for s in range(-(-n * 5 // 8), n - 1, 2):
        m = n - s
        for i0, j0 in {(0, 0), (0, m), (m, 0), (m, m), (m // 2, m // 2)}:
            draws.add((i0, j0, s, s))
    for _ in range(25):
        draws.add(draw_crop_params((n, n), SEL_AREA, SEL_RATIO, rng))
    draws = sorted(draws)

    x = np.clip(_prototype_block_image(model, c) + 0.2 * rng.normal((n, n, ch)), -1.0, 1.0)
    plain_target = min(1.0, plain_floor + 0.003)
    crop_target = crop_ceiling * 0.4

    for _ in range(rounds):
        state = AdamState(m=np.zeros_like(x), v=np.zeros_like(x))
        for step in range(steps):
            plain_logits, plain_vjp = model.forward_with_vjp(x)
            plain_p = _softmax_rows(plain_logits[None])[0]
            ys, crop_vjps = _apply_crops(x, draws, n)
            logits, vjp = model.forward_with_vjp(ys)
            p = _softmax_rows(logits)

            plain_gap = plain_target - plain_p[c]
            crop_gaps = p[:, c] - crop_target
            if plain_gap <= 0 and crop_gaps.max() <= 0:
                break

            # descend -log(1 - score_c) per hinged crop; the prefactor keeps
            # the gradient alive where the wrong-way softmax is saturated
            g_logits = np.zeros_like(logits)
            hinged = crop_gaps > 0
            scale = p[hinged, c:c + 1] / np.maximum(1.0 - p[hinged, c:c + 1], 1e-3)
            g_logits[hinged] = scale * (-p[hinged])
            g_logits[hinged, c] += scale[:, 0]
            g_logits /= max(1, int(hinged.sum()))
            grads = vjp(g_logits)
            gx = np.zeros_like(x)
            for t in np.flatnonzero(hinged):
                gx += crop_vjps[t](grads[t])
            if plain_gap > 0:
                g_plain = -plain_p.copy()  # ascend log score_c
                g_plain[c] += 1.0
                gx -= 5.0 * plain_vjp(g_plain)
            x = np.clip(adam_step(x, gx, state, learning_rate, (0.9, 0.999)), -1.0, 1.0)

        _, plain_score = classify(model, x[None])
        ys, _ = _apply_crops(x, check, n)
        _, scores = classify(model, ys)
        if plain_score[0, c] > plain_floor and scores[:, c].max() < crop_ceiling:
            return x
        worst = np.argsort(-scores[:, c])[:30]
        draws = sorted(set(draws) | {check[t] for t in worst})

    raise DegenerateInputError("could not make the planted input crop-brittle")


def render_genuine_input(bench: ToyBenchmark, target_class: int) -> np.ndarray:
    """Tight render of the class-defining blob configuration."""
    c = int(target_class)
    raw = (bench.class_latents[c] @ bench.generator.style_weight.T
           + bench.generator.style_bias)
    return bench.generator.render_tight(raw[None], NATIVE_SIZE)[0]
