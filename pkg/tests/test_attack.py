import dataclasses
import math

import numpy as np
import pytest

from latentleak.attack import (
    STAGE_SAMPLE,
    AdamState,
    AttackConfig,
    CandidateEntry,
    CandidatePool,
    adam_step,
    final_selection,
    initial_selection,
    optimize_candidates,
    random_initial_selection,
    robust_score,
    run_attack,
    sample_latents,
)
from latentleak.errors import ContractViolationError
from latentleak.models.classifier import classify
from latentleak.models.generator import map_latent_batch
from latentleak.rng import RngStream, derive_stream_id
from latentleak.transforms import TransformPipeline, TransformSpec, apply_pipeline, hflip
from latentleak.types import SPACE_INTERMEDIATE, LatentBatch


def make_pool(rows, c=0):
    entries = [
        CandidateEntry(latent=row.copy(), initial_score=0.0, batch_index=i)
        for i, row in enumerate(rows)
    ]
    return CandidatePool(by_class={c: entries}, sample_pool=LatentBatch(rows, SPACE_INTERMEDIATE))


def entry_with_score(i, robust, failed=False):
    return CandidateEntry(
        latent=np.zeros(2), initial_score=0.0, batch_index=i,
        robust_score=robust, failed=failed,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def test_sample_latents_shape_and_determinism():
    a = sample_latents(50, 8, RngStream(3, 1))
    b = sample_latents(50, 8, RngStream(3, 1))
    assert a.values.shape == (50, 8)
    assert a.space_tag == "input"
    assert np.array_equal(a.values, b.values)


def test_sample_latents_standard_normal_moments():
    z = sample_latents(10_000, 8, RngStream(0, 5)).values
    assert abs(z.mean()) < 0.05
    assert 0.94 < z.var() < 1.06


def test_sample_latents_rejects_bad_counts():
    with pytest.raises(ContractViolationError):
        sample_latents(0, 8, RngStream(0, 0))
    with pytest.raises(ContractViolationError):
        sample_latents(8, 0, RngStream(0, 0))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op():
    w = np.array([1.0, -2.0])
    state = AdamState(m=np.zeros(2), v=np.zeros(2))
    out = adam_step(w, np.zeros(2), state, 0.1)
    assert np.array_equal(out, w)
    assert state.step == 1


def test_adam_first_step_has_learning_rate_magnitude():
    w = np.zeros(3)
    g = np.array([3.0, -2.0, 0.5])
    state = AdamState(m=np.zeros(3), v=np.zeros(3))
    out = adam_step(w, g, state, 0.05)
    # bias correction makes the first step lr * g / (|g| + eps)
    assert np.allclose(out, -0.05 * np.sign(g), atol=1e-6)


def test_adam_minimizes_a_quadratic():
    w = np.array([1.0, 1.0])
    state = AdamState(m=np.zeros(2), v=np.zeros(2))
    for _ in range(100):
        w = adam_step(w, 2.0 * w, state, 0.05)
    assert float(w @ w) < 0.1


def test_adam_rejects_shape_mismatch():
    state = AdamState(m=np.zeros(2), v=np.zeros(2))
    with pytest.raises(ContractViolationError):
        adam_step(np.zeros(3), np.zeros(3), state, 0.1)


# ---------------------------------------------------------------------------
# initial selection
# ---------------------------------------------------------------------------


def test_initial_selection_matches_bruteforce(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    pipe = small_bench.eval_pipeline
    w = map_latent_batch(gen, sample_latents(20, gen.d_z, RngStream(9, 0)))

    pool = initial_selection(w, (0, 2), 5, pipe, gen, model, batch_size=7)

    images = np.stack([apply_pipeline(pipe, img) for img in gen.synthesize_batch(w.values)])
    _, scores = classify(model, images)
    _, flipped = classify(model, hflip(images))
    mean_scores = 0.5 * (scores + flipped)
    for c in (0, 2):
        order = np.argsort(-mean_scores[:, c], kind="stable")[:5]
        picked = pool.entries(c)
        assert [e.batch_index for e in picked] == order.tolist()
        for e in picked:
            assert abs(e.initial_score - mean_scores[e.batch_index, c]) < 1e-12
            assert np.array_equal(e.latent, w.values[e.batch_index])


def test_initial_selection_breaks_ties_by_pool_index(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    pipe = small_bench.eval_pipeline
    base = map_latent_batch(gen, sample_latents(6, gen.d_z, RngStream(9, 1))).values
    # plant exact duplicates: identical rows produce identical scores
    rows = np.concatenate([base, base[:2]])
    pool = initial_selection(
        LatentBatch(rows, SPACE_INTERMEDIATE), (1,), len(rows), pipe, gen, model
    )
    picked = [e.batch_index for e in pool.entries(1)]
    dup_pairs = [(0, 6), (1, 7)]
    for lo, hi in dup_pairs:
        assert picked.index(lo) < picked.index(hi)


def test_initial_selection_requires_deterministic_pipeline(small_bench):
    gen = small_bench.generator
    w = LatentBatch(np.zeros((4, gen.d_w)), SPACE_INTERMEDIATE)
    with pytest.raises(ContractViolationError):
        initial_selection(
            w, (0,), 2, small_bench.selection_pipeline, gen, small_bench.target_model
        )
    with pytest.raises(ContractViolationError):
        initial_selection(
            w, (0,), 9, small_bench.eval_pipeline, gen, small_bench.target_model
        )


def test_random_initial_selection_deterministic():
    rows = RngStream(1, 4).normal((30, 6))
    a = random_initial_selection(LatentBatch(rows, SPACE_INTERMEDIATE), (0, 1), 10, 77)
    b = random_initial_selection(LatentBatch(rows, SPACE_INTERMEDIATE), (0, 1), 10, 77)
    for c in (0, 1):
        ia = [e.batch_index for e in a.entries(c)]
        ib = [e.batch_index for e in b.entries(c)]
        assert ia == ib == sorted(ia)
        assert all(math.isnan(e.initial_score) for e in a.entries(c))
    assert [e.batch_index for e in a.entries(0)] != [e.batch_index for e in a.entries(1)]


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def test_optimize_zero_steps_keeps_latents(small_bench, tiny_config):
    gen = small_bench.generator
    rows = RngStream(10, 0).normal((4, gen.d_w))
    pool = make_pool(rows)
    config = dataclasses.replace(tiny_config, steps=0, target_classes=(0,))
    optimize_candidates(pool, 0, gen, small_bench.target_model, config)
    for i, e in enumerate(pool.entries(0)):
        assert np.array_equal(e.latent, rows[i])
        assert e.optimized and not e.failed
        assert e.loss_trace.shape == (0, 3)


def test_optimize_improves_plain_target_score(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    pipe = small_bench.eval_pipeline
    w = map_latent_batch(gen, sample_latents(40, gen.d_z, RngStream(11, 0)))
    pool = initial_selection(w, (0,), 6, pipe, gen, model)
    config = AttackConfig(
        master_seed=11,
        target_classes=(0,),
        optimization_pipeline=small_bench.optimization_pipeline,
        selection_pipeline=small_bench.selection_pipeline,
        sample_count=40,
        candidates_per_class=6,
        final_count=3,
        steps=30,
        batch_size=6,
    )

    def plain_scores():
        rows = np.stack([e.latent for e in pool.entries(0)])
        images = np.stack([apply_pipeline(pipe, im) for im in gen.synthesize_batch(rows)])
        return classify(model, images)[1][:, 0]

    before = plain_scores()
    optimize_candidates(pool, 0, gen, model, config)
    after = plain_scores()
    assert after.mean() > before.mean()
    assert all(e.optimized for e in pool.entries(0))
    trace = pool.entries(0)[0].loss_trace
    assert trace.shape == (30, 3)
    assert np.all(np.isfinite(trace))
    assert trace[:, 1].min() >= 0.0 and trace[:, 1].max() <= 1.0
    assert trace[:, 2].min() >= 0.0


def test_optimize_is_deterministic(small_bench, tiny_config):
    gen = small_bench.generator
    rows = RngStream(10, 1).normal((5, gen.d_w))
    config = dataclasses.replace(tiny_config, steps=8, target_classes=(0,), batch_size=2)
    results = []
    for _ in range(2):
        pool = make_pool(rows)
        optimize_candidates(pool, 0, gen, small_bench.target_model, config)
        results.append(np.stack([e.latent for e in pool.entries(0)]))
    assert np.array_equal(results[0], results[1])


class PoisonedGradients:
    """Wraps a model; one candidate's pulled-back gradient turns NaN later."""

    def __init__(self, inner, poison_row, poison_from_call):
        self.inner = inner
        self.poison_row = poison_row
        self.poison_from_call = poison_from_call
        self.calls = 0

    @property
    def num_classes(self):
        return self.inner.num_classes

    def forward(self, x):
        return self.inner.forward(x)

    def forward_with_vjp(self, x):
        logits, vjp = self.inner.forward_with_vjp(x)
        self.calls += 1
        poison = self.calls > self.poison_from_call

        def wrapped(go):
            g = np.array(vjp(go))
            if poison:
                g[self.poison_row] = np.nan
            return g

        return logits, wrapped


def test_failed_candidates_freeze_and_drop_out(small_bench, tiny_config):
    gen = small_bench.generator
    rows = RngStream(10, 2).normal((4, gen.d_w))
    config = dataclasses.replace(tiny_config, steps=6, target_classes=(0,), batch_size=4)

    poisoned = PoisonedGradients(small_bench.target_model, poison_row=1, poison_from_call=2)
    pool = make_pool(rows)
    optimize_candidates(pool, 0, gen, poisoned, config)

    reference = make_pool(rows)
    optimize_candidates(
        reference, 0, gen, small_bench.target_model, dataclasses.replace(config, steps=2)
    )

    entries = pool.entries(0)
    assert entries[1].failed
    assert not any(e.failed for i, e in enumerate(entries) if i != 1)
    # frozen exactly where the gradient died: after the two healthy steps
    assert np.array_equal(entries[1].latent, reference.entries(0)[1].latent)
    assert np.all(np.isnan(entries[1].loss_trace[2:]))
    assert np.all(np.isfinite(entries[1].loss_trace[:2]))

    for e in entries:
        e.robust_score = 0.9 if e.failed else 0.1
    final_selection(entries, 2)
    assert not entries[1].selected  # high score cannot rescue a failed candidate


def test_optimize_needs_discriminator_when_weighted(small_bench, tiny_config):
    config = dataclasses.replace(tiny_config, discriminator_weight=0.5)
    pool = make_pool(np.zeros((2, small_bench.generator.d_w)))
    with pytest.raises(ContractViolationError):
        optimize_candidates(pool, 0, small_bench.generator, small_bench.target_model, config)


def test_discriminator_penalty_changes_the_trajectory(small_bench, tiny_config):
    gen = small_bench.generator
    rows = RngStream(10, 3).normal((3, gen.d_w))
    plain_cfg = dataclasses.replace(tiny_config, steps=5, target_classes=(0,))
    disc_cfg = dataclasses.replace(plain_cfg, discriminator_weight=5.0)

    plain_pool = make_pool(rows)
    optimize_candidates(plain_pool, 0, gen, small_bench.target_model, plain_cfg)
    disc_pool = make_pool(rows)
    optimize_candidates(
        disc_pool, 0, gen, small_bench.target_model, disc_cfg,
        discriminator=small_bench.discriminator,
    )
    a = np.stack([e.latent for e in plain_pool.entries(0)])
    b = np.stack([e.latent for e in disc_pool.entries(0)])
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# robust scoring
# ---------------------------------------------------------------------------


class UniformModel:
    """Always emits zero logits, so every class scores exactly 1/n."""

    def __init__(self, n):
        self.num_classes = n

    def forward(self, x):
        x = np.asarray(x)
        return np.zeros(x.shape[:-3] + (self.num_classes,))


def test_robust_score_deterministic_pipeline_equals_plain(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    img = gen.synthesize_batch(RngStream(12, 0).normal((1, gen.d_w)))[0]
    pipe = small_bench.eval_pipeline
    expected = classify(model, apply_pipeline(pipe, img)[None])[1][0, 2]
    got = robust_score(img, 2, model, pipe, mc_samples=17, rng=RngStream(0, 0))
    assert got == expected


def test_robust_score_equals_manual_mc_loop(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    pipe = small_bench.selection_pipeline
    img = gen.synthesize_batch(RngStream(12, 1).normal((1, gen.d_w)))[0]

    stream = RngStream(5, derive_stream_id("robust-check"))
    got = robust_score(img, 1, model, pipe, mc_samples=40, rng=stream.clone())

    manual = stream.clone()
    scores = []
    for _ in range(40):
        transformed = apply_pipeline(pipe, img, manual)
        scores.append(classify(model, transformed[None])[1][0, 1])
    assert abs(got - float(np.mean(scores))) < 1e-12


def test_robust_score_transform_invariant_model():
    model = UniformModel(4)
    pipe = TransformPipeline((TransformSpec("random_resized_crop", {
        "area_range": (0.5, 0.9), "ratio_range": (1.0, 1.0), "out_size": 8,
    }),))
    img = RngStream(12, 2).uniform(-1.0, 1.0, size=(16, 16, 3))
    assert robust_score(img, 0, model, pipe, 25, RngStream(1, 1)) == 0.25


def test_robust_score_mc_estimate_converges(small_bench):
    gen = small_bench.generator
    model = small_bench.target_model
    pipe = small_bench.selection_pipeline
    img = gen.synthesize_batch(RngStream(12, 3).normal((1, gen.d_w)))[0]

    singles = []
    probe = RngStream(6, derive_stream_id("spread"))
    for _ in range(400):
        transformed = apply_pipeline(pipe, img, probe)
        singles.append(classify(model, transformed[None])[1][0, 0])
    spread = float(np.std(singles))

    small = robust_score(img, 0, model, pipe, 100, RngStream(6, derive_stream_id("small")))
    big = robust_score(img, 0, model, pipe, 10_000, RngStream(6, derive_stream_id("big")))
    assert abs(small - big) <= 3.0 * spread / math.sqrt(100) + 1e-9


def test_robust_score_input_validation(small_bench):
    model = small_bench.target_model
    pipe = small_bench.selection_pipeline
    img = np.zeros((24, 24, 3))
    with pytest.raises(ContractViolationError):
        robust_score(img, 0, model, pipe, 0, RngStream(0, 0))
    with pytest.raises(ContractViolationError):
        robust_score(img[None], 0, model, pipe, 5, RngStream(0, 0))


# ---------------------------------------------------------------------------
# final selection
# ---------------------------------------------------------------------------


def test_final_selection_takes_top_scores():
    entries = [entry_with_score(i, s) for i, s in enumerate([0.2, 0.9, 0.5, 0.7])]
    final_selection(entries, 2)
    assert [e.selected for e in entries] == [False, True, False, True]


def test_final_selection_breaks_ties_by_position():
    entries = [entry_with_score(i, 0.5) for i in range(5)]
    final_selection(entries, 3)
    assert [e.selected for e in entries] == [True, True, True, False, False]


def test_final_selection_matches_sort_oracle():
    rng = np.random.default_rng(13)
    scores = rng.uniform(0.0, 1.0, size=200)
    entries = [entry_with_score(i, s) for i, s in enumerate(scores)]
    final_selection(entries, 50)
    expected = set(np.argsort(-scores, kind="stable")[:50].tolist())
    assert {i for i, e in enumerate(entries) if e.selected} == expected
    # invariant: worst selected beats best unselected
    assert min(scores[i] for i in expected) >= max(
        scores[i] for i in range(200) if i not in expected
    )


def test_final_selection_resets_previous_flags():
    entries = [entry_with_score(i, s) for i, s in enumerate([0.1, 0.9, 0.8])]
    entries[0].selected = True
    final_selection(entries, 1)
    assert [e.selected for e in entries] == [False, True, False]


def test_final_selection_shortfall_is_an_error():
    entries = [entry_with_score(0, 0.5), entry_with_score(1, 0.4, failed=True)]
    with pytest.raises(ContractViolationError, match="1 usable"):
        final_selection(entries, 2)


def test_final_selection_requires_scores():
    entries = [CandidateEntry(latent=np.zeros(2), initial_score=0.0, batch_index=0)]
    with pytest.raises(ContractViolationError):
        final_selection(entries, 1)


# ---------------------------------------------------------------------------
# full attack
# ---------------------------------------------------------------------------


def test_run_attack_is_reproducible(small_bench, tiny_config, tiny_result):
    again = run_attack(tiny_config, small_bench.generator, small_bench.target_model)
    assert again.selected_index_sets() == tiny_result.selected_index_sets()
    assert again.config_hash == tiny_result.config_hash
    for c in tiny_config.target_classes:
        for a, b in zip(again.by_class[c], tiny_result.by_class[c]):
            assert abs(a.robust_score - b.robust_score) <= 1e-12
            assert np.array_equal(a.latent, b.latent)


def test_run_attack_classes_are_independent(small_bench, tiny_config, tiny_result):
    for c in tiny_config.target_classes:
        solo_config = dataclasses.replace(tiny_config, target_classes=(c,))
        solo = run_attack(solo_config, small_bench.generator, small_bench.target_model)
        joint_entries = tiny_result.by_class[c]
        solo_entries = solo.by_class[c]
        assert [e.batch_index for e in solo_entries] == [e.batch_index for e in joint_entries]
        for a, b in zip(solo_entries, joint_entries):
            assert np.array_equal(a.latent, b.latent)
            assert a.robust_score == b.robust_score
            assert a.selected == b.selected


def test_run_attack_degenerate_single_candidate(small_bench):
    gen = small_bench.generator
    config = AttackConfig(
        master_seed=99,
        target_classes=(2,),
        optimization_pipeline=small_bench.optimization_pipeline,
        selection_pipeline=small_bench.selection_pipeline,
        sample_count=1,
        candidates_per_class=1,
        final_count=1,
        steps=0,
        mc_samples=3,
    )
    result = run_attack(config, gen, small_bench.target_model)
    z = sample_latents(1, gen.d_z, RngStream(99, derive_stream_id(STAGE_SAMPLE)))
    w = map_latent_batch(gen, z, config.truncation_psi, config.truncation_cutoff)
    [entry] = result.selected(2)
    assert np.array_equal(entry.latent, w.values[0])
    assert entry.selected and not entry.failed


def test_run_attack_selected_subset_optimality(tiny_result):
    for c, entries in tiny_result.by_class.items():
        selected = [e.robust_score for e in entries if e.selected]
        rest = [e.robust_score for e in entries if not e.selected and not e.failed]
        if rest:
            assert min(selected) >= max(rest)


def test_run_attack_rejects_out_of_range_classes(small_bench, tiny_config):
    config = dataclasses.replace(tiny_config, target_classes=(0, 99))
    with pytest.raises(ContractViolationError):
        run_attack(config, small_bench.generator, small_bench.target_model)


def test_selected_images_render_from_selected_latents(small_bench, tiny_result):
    images = tiny_result.selected_images(small_bench.generator, 0)
    sel = tiny_result.selected(0)
    assert images.shape == (len(sel),) + small_bench.generator.output_shape


# ---------------------------------------------------------------------------
# config validation and hashing
# ---------------------------------------------------------------------------


def test_attack_config_collects_all_problems(small_bench):
    with pytest.raises(ContractViolationError) as exc:
        AttackConfig(
            master_seed=0,
            target_classes=(0, 0),
            optimization_pipeline=small_bench.optimization_pipeline,
            selection_pipeline=small_bench.selection_pipeline,
            sample_count=100,
            candidates_per_class=500,
            learning_rate=-1.0,
            loss="hinge",
        )
    message = str(exc.value)
    for fragment in ("duplicates", "candidates_per_class", "learning_rate", "loss"):
        assert fragment in message


def test_attack_config_hash_tracks_semantics(small_bench, tiny_config):
    same = default_config_copy(small_bench)
    assert same.hash() == default_config_copy(small_bench).hash()
    changed = dataclasses.replace(same, learning_rate=0.004)
    assert changed.hash() != same.hash()
    assert tiny_config.hash() != same.hash()


def default_config_copy(bench):
    return AttackConfig(
        master_seed=1,
        target_classes=(0, 1),
        optimization_pipeline=bench.optimization_pipeline,
        selection_pipeline=bench.selection_pipeline,
        sample_count=50,
        candidates_per_class=10,
        final_count=5,
        steps=2,
    )
