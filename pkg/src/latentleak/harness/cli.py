"""Command line entry point.

Subcommands: attack (run one experiment), ablate (preset comparison),
diagnose (loss-comparison curves), metrics (recompute feature-based
metrics from a run directory), verify (check manifest hashes).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractViolationError, DegenerateInputError
from ..metrics import FeatureMatrix, density_coverage, fid, precision_recall

_METRIC_ERRORS = (ContractViolationError, DegenerateInputError)
from .config import load_config, parse_config
from .experiment import gradient_diagnostic, run_ablation, run_experiment, verify_manifest
from .presets import PRESETS


def _add_common(sub):
    sub.add_argument("--config", help="path to a JSON experiment config")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", default="run", help="output directory")


def _load(args):
    if not args.config:
        raise ConfigError(["--config is required for this command"])
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _cmd_attack(args) -> int:
    config = _load(args)
    _, report = run_experiment(config, args.out)
    agg = report.aggregate
    print(f"run complete: {args.out}")
    for key in ("acc_at_1", "acc_at_5", "delta_eval", "fid"):
        if agg.get(key) is not None:
            print(f"  {key} = {agg[key]:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    config = _load(args)
    reports = run_ablation(config, args.presets, args.out)
    print(f"ablation complete: {args.out}/ablation.csv")
    for name, report in reports.items():
        acc = report.aggregate.get("acc_at_1")
        print(f"  {name}: acc_at_1 = {acc:.4f}" if acc is not None else f"  {name}")
    return 0


def _cmd_diagnose(args) -> int:
    config = _load(args)
    curves = gradient_diagnostic(config, args.out)
    print(f"diagnostic complete: {args.out}/diagnostic.csv")
    for kind, data in curves.items():
        print(f"  {kind}: final score = {data['score'][-1]:.4f}, "
              f"final normalized grad norm = {data['normalized_norm'][-1]:.4f}")
    return 0


def _feature_classes(feat_dir: Path, prefix: str) -> list[int]:
    return sorted(
        int(p.stem.rsplit("_", 1)[1]) for p in feat_dir.glob(f"{prefix}_*.fm")
    )


def _cmd_metrics(args) -> int:
    run = Path(args.out)
    feat_dir = run / "features"
    if not feat_dir.is_dir():
        print(f"no features directory under {run}", file=sys.stderr)
        return 2
    config = parse_config(json.loads((run / "config.json").read_text()))
    k = config.metrics["knn_k"]
    classes = _feature_classes(feat_dir, "aux_generated")
    required = [f"{kind}_{role}_{c}.fm"
                for c in classes for kind in ("aux", "eval") for role in ("train", "generated")]
    missing = [name for name in required if not (feat_dir / name).exists()]
    if missing:
        print("missing feature files: " + ", ".join(missing), file=sys.stderr)
        return 2

    def load(kind, role, c):
        return FeatureMatrix.load(feat_dir / f"{kind}_{role}_{c}.fm").rows

    columns = ["class", "delta_eval", "delta_aux", "fid",
               "precision", "recall", "density", "coverage"]
    rows = []
    pooled: dict[str, list[np.ndarray]] = {"real": [], "fake": []}
    delta_pool: dict[str, list[np.ndarray]] = {"eval": [], "aux": []}
    def knn_block(real, fake, values: dict) -> None:
        try:
            values["fid"] = fid(real, fake)
            values["precision"], values["recall"] = precision_recall(real, fake, k=k)
            values["density"], values["coverage"] = density_coverage(real, fake, k=k)
        except _METRIC_ERRORS:
            pass

    for c in classes:
        values: dict[str, float] = {}
        for kind in ("eval", "aux"):
            train, generated = load(kind, "train", c), load(kind, "generated", c)
            d2 = ((generated[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
            mins = d2.min(axis=1)
            values[f"delta_{kind}"] = float(mins.mean())
            delta_pool[kind].append(mins)
        real, fake = load("aux", "train", c), load("aux", "generated", c)
        knn_block(real, fake, values)
        pooled["real"].append(real)
        pooled["fake"].append(fake)
        rows.append((c, values))

    agg: dict[str, float] = {}
    for kind in ("eval", "aux"):
        agg[f"delta_{kind}"] = float(np.concatenate(delta_pool[kind]).mean())
    knn_block(np.concatenate(pooled["real"]), np.concatenate(pooled["fake"]), agg)

    def cells(values: dict) -> list[str]:
        return ["" if values.get(col) is None else repr(float(values[col]))
                for col in columns[1:]]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerow(["aggregate"] + cells(agg))
    for c, values in rows:
        writer.writerow([c] + cells(values))
    (run / "metrics_recomputed.csv").write_text(buf.getvalue())
    print(f"recomputed metrics: {run}/metrics_recomputed.csv")
    shown = ", ".join(f"{key} = {agg[key]:.4f}" for key in ("fid", "precision", "recall")
                      if agg.get(key) is not None)
    if shown:
        print("  " + shown)
    return 0


def _cmd_verify(args) -> int:
    problems = verify_manifest(args.out)
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 1
    manifest = json.loads((Path(args.out) / "manifest.json").read_text())
    print(f"manifest ok: {len(manifest.get('files', {}))} files verified")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentleak",
        description="latent-space inversion attacks against image classifiers, desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run one configured attack end to end")
    _add_common(p_attack)
    p_attack.set_defaults(func=_cmd_attack)

    p_ablate = sub.add_parser("ablate", help="run single-change variants and compare")
    _add_common(p_ablate)
    p_ablate.add_argument(
        "presets", nargs="*", default=["standard"],
        help=f"preset names (default: standard); known: {', '.join(sorted(PRESETS))}",
    )
    p_ablate.set_defaults(func=_cmd_ablate)

    p_diag = sub.add_parser("diagnose", help="compare loss functions on fixed candidates")
    _add_common(p_diag)
    p_diag.set_defaults(func=_cmd_diagnose)

    p_metrics = sub.add_parser("metrics", help="recompute feature metrics for a run directory")
    _add_common(p_metrics)
    p_metrics.set_defaults(func=_cmd_metrics)

    p_verify = sub.add_parser("verify", help="check a run directory against its manifest")
    _add_common(p_verify)
    p_verify.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
