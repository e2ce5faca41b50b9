import csv
import json
import shutil

import numpy as np
import pytest

from latentleak.errors import ConfigError, ContractViolationError
from latentleak.harness.cli import main
from latentleak.harness.config import (
    ExperimentConfig,
    canonical_json,
    config_hash,
    load_config,
    parse_config,
)
from latentleak.harness.experiment import (
    gradient_diagnostic,
    run_ablation,
    run_experiment,
    verify_manifest,
)
from latentleak.harness.images import from_uint8, image_grid, load_png, save_png, to_uint8
from latentleak.harness.presets import PRESETS, preset_config
from latentleak.rng import RngStream

TINY_DOC = {
    "seed": 5,
    "models": {"kind": "toy_benchmark", "num_classes": 4, "n_train": 14},
    "attack": {
        "sample_count": 120,
        "candidates_per_class": 12,
        "final_count": 6,
        "steps": 8,
        "mc_samples": 20,
        "batch_size": 8,
    },
}


def tiny_doc(**attack_overrides):
    doc = json.loads(json.dumps(TINY_DOC))
    doc["attack"].update(attack_overrides)
    return doc


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_minimal_config_gets_defaults():
    cfg = parse_config({"seed": 0})
    assert cfg.seed == 0 and cfg.schema_version == 1
    a = cfg.attack
    assert (a["sample_count"], a["candidates_per_class"], a["final_count"]) == (2000, 200, 50)
    assert (a["steps"], a["learning_rate"], a["mc_samples"], a["batch_size"]) == (50, 0.005, 100, 20)
    assert a["adam_betas"] == [0.1, 0.1]
    assert (a["truncation_psi"], a["truncation_cutoff"]) == (0.5, 8)
    assert a["loss"] == "poincare" and a["initial_selection_mode"] == "score"
    assert a["target_classes"] is None and a["optimization_pipeline"] is None
    assert cfg.models == {"kind": "toy_benchmark", "num_classes": 10, "n_train": 40}
    assert cfg.metrics == {"knn_k": 3, "fid_filter": False}
    assert cfg.output == {"save_images": True}


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed: required"):
        parse_config({})
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"seed": True})


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigError) as info:
        parse_config({
            "seed": 0,
            "bogus": 1,
            "models": {"kind": "toy_benchmark", "what": 2},
            "attack": {"nope": 3},
            "metrics": {"x": 4},
            "output": {"y": 5},
        })
    text = str(info.value)
    for fragment in (
        "top level: unknown key 'bogus'",
        "models: unknown key 'what'",
        "attack: unknown key 'nope'",
        "metrics: unknown key 'x'",
        "output: unknown key 'y'",
    ):
        assert fragment in text


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config({
            "seed": -1,
            "attack": {"learning_rate": 0, "loss": "hinge", "adam_betas": [0.5]},
        })
    assert len(info.value.problems) == 4
    text = str(info.value)
    assert "seed" in text and "learning_rate" in text
    assert "loss" in text and "adam_betas" in text


def test_final_count_cross_check():
    with pytest.raises(ConfigError, match="cannot exceed"):
        parse_config({"seed": 0, "attack": {"candidates_per_class": 10, "final_count": 20}})


def test_target_classes_validation():
    cfg = parse_config({"seed": 0, "attack": {"target_classes": [3, 1]}})
    assert cfg.attack["target_classes"] == [3, 1]
    for bad in ([0, 0], [], [1.5], [-1], "all"):
        with pytest.raises(ConfigError, match="target_classes"):
            parse_config({"seed": 0, "attack": {"target_classes": bad}})


def test_schema_version_check():
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config({"seed": 0, "schema_version": 99})


def test_pipeline_parsing_and_construction():
    cfg = parse_config({"seed": 0, "attack": {
        "optimization_pipeline": [
            {"kind": "center_crop", "params": {"size": [26, 26]}},
            {"kind": "resize", "params": {"size": [24, 24]}},
        ],
    }})
    pipe = cfg.pipeline("optimization")
    assert [s.kind for s in pipe.specs] == ["center_crop", "resize"]
    assert pipe.specs[0].params["size"] == (26, 26)
    assert cfg.pipeline("selection") is None

    with pytest.raises(ConfigError, match=r"optimization_pipeline\[0\]"):
        parse_config({"seed": 0, "attack": {
            "optimization_pipeline": [{"kind": "sharpen", "params": {}}],
        }})


def test_round_trip_and_hash():
    cfg = parse_config(tiny_doc())
    again = parse_config(cfg.to_dict())
    assert canonical_json(again) == canonical_json(cfg)
    assert config_hash(again) == config_hash(cfg)
    # hash ignores formatting but not values
    reordered = json.loads(json.dumps(tiny_doc(), sort_keys=True))
    assert config_hash(parse_config(reordered)) == config_hash(cfg)
    other = tiny_doc(steps=9)
    assert config_hash(parse_config(other)) != config_hash(cfg)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_doc()))
    assert config_hash(load_config(path)) == config_hash(parse_config(tiny_doc()))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


EXPECTED_PRESETS = {
    "standard", "ce_loss", "no_center_cropping", "resize_small", "resize_large",
    "no_random_cropping", "no_initial_selection", "no_final_selection", "discriminator_loss",
}


def test_preset_names():
    assert set(PRESETS) == EXPECTED_PRESETS


def test_preset_effects():
    base = parse_config(tiny_doc())

    assert config_hash(preset_config(base, "standard")) == config_hash(base)

    ce = preset_config(base, "ce_loss")
    assert ce.attack["loss"] == "cross_entropy"
    assert ce.attack["learning_rate"] == 0.01
    assert ce.attack["sample_count"] == base.attack["sample_count"]

    nofinal = preset_config(base, "no_final_selection")
    assert nofinal.attack["final_count"] == base.attack["candidates_per_class"]

    noinit = preset_config(base, "no_initial_selection")
    assert noinit.attack["initial_selection_mode"] == "random"

    disc = preset_config(base, "discriminator_loss")
    assert disc.attack["discriminator_weight"] == 0.1

    small = preset_config(base, "resize_small")
    opt = small.pipeline("optimization")
    assert [s.kind for s in opt.specs] == ["center_crop", "resize", "random_resized_crop"]
    assert opt.specs[1].params["size"] == (17, 17)
    assert small.pipeline("selection").specs[2].params["out_size"] == (17, 17)
    assert preset_config(base, "resize_large").pipeline("optimization").specs[1].params["size"] == (32, 32)

    nocenter = preset_config(base, "no_center_cropping")
    assert [s.kind for s in nocenter.pipeline("optimization").specs] == ["resize", "random_resized_crop"]

    norrc = preset_config(base, "no_random_cropping")
    assert [s.kind for s in norrc.pipeline("optimization").specs] == ["center_crop", "resize"]
    assert norrc.attack["selection_pipeline"] is None  # selection keeps its randomness


def test_unknown_preset_rejected():
    base = parse_config({"seed": 0})
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_config(base, "turbo")


# ---------------------------------------------------------------------------
# image persistence
# ---------------------------------------------------------------------------


def test_uint8_mapping():
    x = np.array([-1.0, 0.0, 1.0])
    assert to_uint8(x).tolist() == [0, 128, 255]
    assert to_uint8(np.array([-2.0, 2.0])).tolist() == [0, 255]
    rng = RngStream(41, 0)
    img = rng.uniform(-1.0, 1.0, (6, 6, 3))
    assert np.abs(from_uint8(to_uint8(img)) - img).max() <= 1.0 / 127.5


def test_png_round_trip(tmp_path):
    img = RngStream(41, 1).uniform(-1.0, 1.0, (8, 8, 3))
    path = tmp_path / "x.png"
    save_png(path, img)
    back = load_png(path)
    assert back.shape == (8, 8, 3)
    assert np.abs(back - img).max() <= 1.0 / 127.5 + 1e-12
    with pytest.raises(ContractViolationError):
        save_png(tmp_path / "bad.png", np.zeros((8, 8)))


def test_image_grid_geometry():
    images = np.stack([np.full((4, 4, 3), v) for v in (-1.0, -0.5, 0.0, 0.5, 1.0)])
    grid = image_grid(images, columns=2, pad=2, fill=-1.0)
    assert grid.shape == (3 * 4 + 2 * 2, 2 * 4 + 1 * 2, 3)
    assert np.array_equal(grid[0:4, 0:4], images[0])
    assert np.array_equal(grid[0:4, 6:10], images[1])
    assert np.array_equal(grid[12:16, 0:4], images[4])
    assert np.all(grid[0:4, 4:6] == -1.0)  # padding column
    assert np.all(grid[12:16, 6:10] == -1.0)  # unused final cell
    with pytest.raises(ContractViolationError):
        image_grid(np.zeros((0, 4, 4, 3)))


# ---------------------------------------------------------------------------
# experiment orchestration
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    config = parse_config(tiny_doc())
    out = tmp_path_factory.mktemp("run")
    result, report = run_experiment(config, out)
    return config, out, result, report


def test_run_directory_contents(tiny_run):
    config, out, result, report = tiny_run
    for name in ("config.json", "report.csv", "report.json",
                 "selection.json", "loss_traces.csv", "manifest.json"):
        assert (out / name).is_file(), name
    for c in range(4):
        for side in ("generated", "train"):
            assert (out / "features" / f"aux_{side}_{c}.fm").is_file()
            assert (out / "features" / f"eval_{side}_{c}.fm").is_file()
        assert (out / "images" / f"class_{c:03d}" / "rank_000.png").is_file()
        assert (out / "images" / f"grid_class_{c:03d}.png").is_file()


def test_saved_config_round_trips(tiny_run):
    config, out, _, _ = tiny_run
    saved = parse_config(json.loads((out / "config.json").read_text()))
    assert config_hash(saved) == config_hash(config)


def test_report_covers_all_metrics(tiny_run):
    _, _, _, report = tiny_run
    for key in ("acc_at_1", "acc_at_5", "delta_eval", "delta_aux",
                "fid", "precision", "recall", "density", "coverage"):
        assert key in report.aggregate, key
        assert np.isfinite(report.aggregate[key])
    assert set(report.per_class) == set(range(4))


def test_loss_trace_csv_layout(tiny_run):
    _, out, _, _ = tiny_run
    rows = list(csv.reader((out / "loss_traces.csv").read_text().splitlines()))
    assert rows[0] == ["class", "candidate", "step", "loss", "target_score", "grad_norm"]
    assert len(rows) - 1 == 4 * 12 * 8  # classes x candidates x steps
    steps = [int(r[2]) for r in rows[1:]]
    assert min(steps) == 0 and max(steps) == 7


def test_selection_json_matches_result(tiny_run):
    _, out, result, _ = tiny_run
    doc = json.loads((out / "selection.json").read_text())
    assert set(doc) == {"0", "1", "2", "3"}
    for c, indices in result.selected_index_sets().items():
        assert doc[str(c)] == list(indices)
        assert len(doc[str(c)]) == 6


def test_manifest_and_verification(tiny_run, tmp_path):
    config, out, _, _ = tiny_run
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["config_hash"] == config_hash(config)
    assert len(manifest["grid_captions"]["0"]) == 6
    assert verify_manifest(out) == []

    # tampering and deletion are caught on a copied run directory
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "report.csv").write_text("tampered\n")
    (copy / "selection.json").unlink()
    problems = verify_manifest(copy)
    assert "hash mismatch: report.csv" in problems
    assert "missing file: selection.json" in problems
    assert verify_manifest(tmp_path / "nowhere") != []


def test_metrics_cli_recomputes_from_features(tiny_run):
    _, out, _, report = tiny_run
    assert main(["metrics", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "metrics_recomputed.csv").read_text().splitlines()))
    header = rows[0]
    agg = dict(zip(header, rows[1]))
    assert agg["class"] == "aggregate"
    assert float(agg["delta_eval"]) == pytest.approx(report.aggregate["delta_eval"], rel=1e-9)
    assert float(agg["fid"]) == pytest.approx(report.aggregate["fid"], rel=1e-9)


def test_verify_cli(tiny_run, tmp_path):
    _, out, _, _ = tiny_run
    assert main(["verify", "--out", str(out)]) == 0
    copy = tmp_path / "copy2"
    shutil.copytree(out, copy)
    (copy / "report.json").write_text("{}\n")
    assert main(["verify", "--out", str(copy)]) == 1


def test_attack_cli_with_seed_override(tmp_path):
    doc = tiny_doc(sample_count=60, candidates_per_class=6, final_count=3,
                   steps=4, mc_samples=8)
    doc["models"]["n_train"] = 8
    doc["output"] = {"save_images": False}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "run"
    assert main(["attack", "--config", str(path), "--seed", "6", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 6
    assert not (out / "images").exists()


def test_cli_config_errors_exit_2(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["attack", "--config", str(broken), "--out", str(tmp_path / "r")]) == 2
    assert main(["attack", "--out", str(tmp_path / "r")]) == 2
    missing = tmp_path / "cfg.json"
    missing.write_text(json.dumps({"seed": 0, "attack": {"loss": "hinge"}}))
    assert main(["attack", "--config", str(missing), "--out", str(tmp_path / "r")]) == 2


def test_metrics_cli_needs_features(tmp_path):
    assert main(["metrics", "--out", str(tmp_path)]) == 2


def test_run_ablation(tmp_path):
    base = parse_config(tiny_doc(sample_count=60, candidates_per_class=6,
                                 final_count=3, steps=4, mc_samples=8))
    with pytest.raises(ConfigError, match="unknown preset"):
        run_ablation(base, ["standard", "turbo"], tmp_path / "nope")
    reports = run_ablation(base, ["standard", "no_final_selection"], tmp_path / "ab")
    assert set(reports) == {"standard", "no_final_selection"}
    rows = list(csv.reader((tmp_path / "ab" / "ablation.csv").read_text().splitlines()))
    assert rows[0][0] == "preset"
    assert [r[0] for r in rows[1:]] == ["standard", "no_final_selection"]
    assert (tmp_path / "ab" / "standard" / "report.csv").is_file()
    # the no-final-selection variant keeps every optimized candidate
    sel = json.loads((tmp_path / "ab" / "no_final_selection" / "selection.json").read_text())
    assert all(len(v) == 6 for v in sel.values())


def test_gradient_diagnostic(tmp_path):
    config = parse_config(tiny_doc(sample_count=60, candidates_per_class=6,
                                   final_count=3, steps=6, mc_samples=8))
    curves = gradient_diagnostic(config, tmp_path)
    assert set(curves) == {"poincare", "cross_entropy"}
    for data in curves.values():
        assert len(data["score"]) == 6 and len(data["normalized_norm"]) == 6
        assert data["normalized_norm"][0] == 1.0
        assert all(np.isfinite(v) for v in data["score"])
    rows = list(csv.reader((tmp_path / "diagnostic.csv").read_text().splitlines()))
    assert rows[0] == ["loss_kind", "step", "mean_target_score", "normalized_grad_norm"]
    assert len(rows) - 1 == 2 * 6
