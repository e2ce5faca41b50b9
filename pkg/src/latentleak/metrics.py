"""Evaluation metrics for inversion results.

Covers classification-based metrics (top-1/top-5 accuracy of an
independent evaluation classifier), feature distances against the target
classes' training data, Frechet distance between Gaussian moment
approximations of feature sets, and the k-nearest-neighbor manifold
metrics precision, recall, density, and coverage.

Every metric is exact given its inputs; nothing here is stochastic.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolationError
from .models.classifier import classify
from .transforms import TransformPipeline, apply_pipeline_batch
from .types import as_float_array

FEATURE_FILE_MAGIC = "latentleak-features v1"


@dataclass(frozen=True)
class FeatureMatrix:
    """N x D feature rows with a source tag and optional per-row labels."""

    rows: np.ndarray
    source_tag: str = ""
    labels: np.ndarray | None = None

    def __post_init__(self):
        rows = as_float_array(self.rows, "feature rows", 2)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (rows.shape[0],):
                raise ContractViolationError("labels must have one entry per feature row")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def save(self, path) -> None:
        """Plain text layout: magic line, header line, one row per line.

        Header: `count=<n> dim=<d> tag=<tag>`; an optional `labels=` line
        carries comma-separated integers; rows are space-separated float
        reprs, row-major.
        """
        lines = [FEATURE_FILE_MAGIC, f"count={len(self)} dim={self.dim} tag={self.source_tag}"]
        if self.labels is not None:
            lines.append("labels=" + ",".join(str(int(v)) for v in self.labels))
        for row in self.rows:
            lines.append(" ".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != FEATURE_FILE_MAGIC:
            raise ContractViolationError(f"{path}: not a feature matrix file")
        header = dict(part.split("=", 1) for part in lines[1].split(" ") if "=" in part)
        count, dim = int(header["count"]), int(header["dim"])
        tag = header.get("tag", "")
        body = lines[2:]
        labels = None
        if body and body[0].startswith("labels="):
            labels = np.asarray(
                [int(v) for v in body[0][len("labels="):].split(",")], dtype=np.int64
            )
            body = body[1:]
        rows = np.asarray([[float(v) for v in line.split()] for line in body[:count]])
        if rows.shape != (count, dim):
            raise ContractViolationError(f"{path}: row data does not match header")
        return cls(rows, tag, labels)


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.rows
    return as_float_array(x, "features", 2)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------


def attack_accuracy(
    results,
    eval_model,
    gen=None,
    pipeline: TransformPipeline | None = None,
    top_k: tuple[int, int] = (1, 5),
) -> dict:
    """Top-1/top-5 accuracy of `eval_model` on the selected attack results.

    Images are re-synthesized from the selected latents and, when a
    pipeline is given, adapted with it before classification (the same
    deterministic crop/resize the attack itself used).  Returns aggregate
    and per-class accuracies; when fewer classes exist than `top_k[1]`, the
    cutoff shrinks and the report notes it.
    """
    if eval_model is None:
        raise ContractViolationError("attack_accuracy requires an evaluation model")
    if pipeline is not None and pipeline.has_random:
        raise ContractViolationError("evaluation pipeline must be deterministic")
    num_classes = eval_model.num_classes
    k1, k5 = top_k
    k5_eff = min(k5, num_classes)
    note = None
    if k5_eff < k5:
        note = f"top-{k5} cutoff reduced to {k5_eff} ({num_classes} classes)"

    if gen is None:
        raise ContractViolationError("attack_accuracy needs the generator to render results")
    per_class = {}
    hits1 = hits5 = total = 0
    for c, entries in results.by_class.items():
        sel = [e for e in entries if e.selected]
        if not sel:
            raise ContractViolationError(f"class {c} has no selected results")
        images = gen.synthesize_batch(np.stack([e.latent for e in sel]))
        if pipeline is not None:
            images = apply_pipeline_batch(pipeline, images)
        logits, _ = classify(eval_model, images)
        order = np.argsort(-logits, axis=-1, kind="stable")
        c1 = int((order[:, 0] == c).sum())
        c5 = int((order[:, :k5_eff] == c).any(axis=-1).sum())
        per_class[c] = {"acc_at_1": c1 / len(sel), "acc_at_5": c5 / len(sel)}
        hits1 += c1
        hits5 += c5
        total += len(sel)
    out = {
        "acc_at_1": hits1 / total,
        "acc_at_5": hits5 / total,
        "per_class": per_class,
    }
    if note:
        out["note"] = note
    return out


def feature_distance(results, class_training_features: dict, extractor, gen=None) -> dict:
    """Mean minimal squared feature distance to same-class training data.

    `extractor` maps a batch of images (B, H, W, C) to feature rows; it
    should bake in any input adaptation the feature model needs.  Lower is
    better: results that landed near some training sample of the right
    class score small.
    """
    if gen is None:
        raise ContractViolationError("feature_distance needs the generator to render results")
    per_class = {}
    values = []
    for c, entries in results.by_class.items():
        sel = [e for e in entries if e.selected]
        if not sel:
            raise ContractViolationError(f"class {c} has no selected results")
        train = _rows(class_training_features[c])
        images = gen.synthesize_batch(np.stack([e.latent for e in sel]))
        feats = np.asarray(extractor(images), dtype=np.float64)
        d2 = _pairwise_sq_dists(feats, train)
        mins = d2.min(axis=1)
        per_class[c] = float(mins.mean())
        values.extend(mins.tolist())
    return {"mean": float(np.mean(values)), "per_class": per_class}


def inner_class_baseline(class_features: dict) -> dict:
    """Average squared distance between same-class training samples.

    For every sample, the mean squared distance to all other samples of
    its class; averaged per class, then summarized as mean +/- std across
    classes.  This is the scale against which feature_distance is read.
    """
    per_class = {}
    for c, feats in class_features.items():
        rows = _rows(feats)
        n = rows.shape[0]
        if n < 2:
            raise ContractViolationError(f"class {c} needs at least 2 samples")
        d2 = _pairwise_sq_dists(rows, rows)
        np.fill_diagonal(d2, 0.0)
        per_class[c] = float(d2.sum() / (n * (n - 1)))
    vals = np.array(list(per_class.values()))
    return {"mean": float(vals.mean()), "std": float(vals.std()), "per_class": per_class}


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


def matrix_sqrt_psd(mat: np.ndarray, sym_tol: float = 1e-8) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below zero (roundoff) are clamped to zero.  Raises when the
    input is not symmetric within `sym_tol`.
    """
    mat = as_float_array(mat, "matrix", 2)
    if mat.shape[0] != mat.shape[1]:
        raise ContractViolationError("matrix must be square")
    asym = float(np.abs(mat - mat.T).max()) if mat.size else 0.0
    if asym > sym_tol * max(1.0, float(np.abs(mat).max())):
        raise ContractViolationError(f"matrix not symmetric: max asymmetry {asym:.3g}")
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians given their moments.

    d^2 = ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^(1/2) S2 S1^(1/2))^(1/2))

    The symmetric product form keeps the matrix square root on a PSD
    matrix.  Tiny negative totals from roundoff clamp to zero.
    """
    mu1 = as_float_array(mu1, "mu1", 1)
    mu2 = as_float_array(mu2, "mu2", 1)
    s1 = as_float_array(sigma1, "sigma1", 2)
    s2 = as_float_array(sigma2, "sigma2", 2)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape[0] != mu1.shape[0]:
        raise ContractViolationError("moment shapes disagree")
    diff = mu1 - mu2
    root_s1 = matrix_sqrt_psd(s1)
    inner = matrix_sqrt_psd(root_s1 @ s2 @ root_s1)
    total = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(inner))
    return max(total, 0.0)


def fid(real, generated) -> float:
    """Frechet distance between two feature sets (sample moments, ddof=1)."""
    a = _rows(real)
    b = _rows(generated)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ContractViolationError("fid needs at least 2 rows per side")
    if a.shape[1] != b.shape[1]:
        raise ContractViolationError("feature dimensions disagree")
    return fid_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False, ddof=1),
        b.mean(axis=0), np.cov(b, rowvar=False, ddof=1),
    )


# ---------------------------------------------------------------------------
# k-NN manifold metrics
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.clip(d2, 0.0, None)


def _knn_radii(rows: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest neighbor (self excluded)."""
    n = rows.shape[0]
    if n <= k:
        raise ContractViolationError(f"need more than k={k} points, got {n}")
    d2 = _pairwise_sq_dists(rows, rows)
    np.fill_diagonal(d2, np.inf)
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sqrt(kth)


def precision_recall(real, generated, k: int = 3) -> tuple[float, float]:
    """Manifold precision and recall with k-NN ball estimates.

    A point lies on the estimated manifold of a set S when it falls within
    the k-th neighbor radius of at least one member of S.  Precision is
    the fraction of generated points on the real manifold; recall the
    fraction of real points on the generated manifold.
    """
    r = _rows(real)
    g = _rows(generated)
    if r.shape[1] != g.shape[1]:
        raise ContractViolationError("feature dimensions disagree")
    radii_r = _knn_radii(r, k)
    radii_g = _knn_radii(g, k)
    d = np.sqrt(_pairwise_sq_dists(g, r))
    precision = float((d <= radii_r[None, :]).any(axis=1).mean())
    recall = float((d.T <= radii_g[None, :]).any(axis=1).mean())
    return precision, recall


def density_coverage(real, generated, k: int = 3) -> tuple[float, float]:
    """Density and coverage of the generated set against the real manifold.

    Density counts, per generated sample, how many real-sample k-NN balls
    contain it, normalized by k (can exceed 1).  Coverage is the fraction
    of real samples whose k-NN ball contains at least one generated sample.
    """
    r = _rows(real)
    g = _rows(generated)
    if r.shape[1] != g.shape[1]:
        raise ContractViolationError("feature dimensions disagree")
    radii_r = _knn_radii(r, k)
    d = np.sqrt(_pairwise_sq_dists(g, r))
    inside = d <= radii_r[None, :]
    density = float(inside.sum() / (k * g.shape[0]))
    coverage = float(inside.any(axis=0).mean())
    return density, coverage


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

_REPORT_COLUMNS = (
    "class",
    "acc_at_1",
    "acc_at_5",
    "delta_eval",
    "delta_aux",
    "fid",
    "precision",
    "recall",
    "density",
    "coverage",
)


@dataclass
class MetricsReport:
    """Aggregate and per-class metric rows with stable serialization."""

    aggregate: dict
    per_class: dict[int, dict]
    notes: list[str] = field(default_factory=list)

    def _row(self, label, values: dict) -> list[str]:
        row = [str(label)]
        for col in _REPORT_COLUMNS[1:]:
            v = values.get(col)
            row.append("" if v is None else repr(float(v)))
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_REPORT_COLUMNS)
        writer.writerow(self._row("aggregate", self.aggregate))
        for c in sorted(self.per_class):
            writer.writerow(self._row(c, self.per_class[c]))
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "aggregate": self.aggregate,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "notes": list(self.notes),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, csv_path, json_path) -> None:
        Path(csv_path).write_text(self.to_csv())
        Path(json_path).write_text(self.to_json())


def check_distinct_models(target_model, eval_model) -> None:
    """Warn when evaluation would reuse the target model itself."""
    if target_model is eval_model:
        warnings.warn(
            "evaluation model is the target model; reported accuracy is not independent",
            UserWarning,
            stacklevel=2,
        )
