"""latentleak: model inversion attacks on image classifiers, desk scale.

The attack optimizes latent inputs of a generative image prior so the
synthesized images trigger a target class of a classifier, using a
hyperbolic distance loss, randomized image transformations, and a
robustness-based two-stage candidate selection.  Everything runs on
analytic toy models in plain numpy; the same interfaces accept any
differentiable generator/classifier pair.
"""

from .attack import (
    AttackConfig,
    AttackResult,
    CandidateEntry,
    adam_step,
    final_selection,
    initial_selection,
    robust_score,
    run_attack,
    sample_latents,
)
from .benchmark import ToyBenchmark, build_benchmark, default_attack_config
from .errors import ConfigError, ContractViolationError, DegenerateInputError
from .losses import (
    cross_entropy,
    poincare_distance,
    poincare_loss,
    softmax,
    target_vector,
)
from .metrics import (
    FeatureMatrix,
    MetricsReport,
    attack_accuracy,
    density_coverage,
    feature_distance,
    fid,
    fid_from_moments,
    inner_class_baseline,
    precision_recall,
)
from .models import (
    BlobGenerator,
    PooledFeatureMap,
    PrototypeClassifier,
    SmoothnessDiscriminator,
    classify,
    load_model,
    map_latent,
    map_latent_batch,
    save_model,
    synthesize,
    truncate_latents,
)
from .rng import RngStream, derive_stream_id
from .transforms import (
    TransformPipeline,
    TransformSpec,
    apply_pipeline,
    apply_pipeline_batch,
    center_crop,
    hflip,
    random_resized_crop,
    resize_bilinear,
)
from .types import ImageTensor, LatentBatch, LatentVector

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "BlobGenerator",
    "CandidateEntry",
    "ConfigError",
    "ContractViolationError",
    "DegenerateInputError",
    "FeatureMatrix",
    "ImageTensor",
    "LatentBatch",
    "LatentVector",
    "MetricsReport",
    "PooledFeatureMap",
    "PrototypeClassifier",
    "RngStream",
    "SmoothnessDiscriminator",
    "ToyBenchmark",
    "TransformPipeline",
    "TransformSpec",
    "adam_step",
    "apply_pipeline",
    "apply_pipeline_batch",
    "attack_accuracy",
    "build_benchmark",
    "center_crop",
    "classify",
    "cross_entropy",
    "default_attack_config",
    "density_coverage",
    "derive_stream_id",
    "feature_distance",
    "fid",
    "fid_from_moments",
    "final_selection",
    "hflip",
    "initial_selection",
    "inner_class_baseline",
    "load_model",
    "map_latent",
    "map_latent_batch",
    "poincare_distance",
    "poincare_loss",
    "precision_recall",
    "random_resized_crop",
    "resize_bilinear",
    "robust_score",
    "run_attack",
    "sample_latents",
    "save_model",
    "softmax",
    "synthesize",
    "target_vector",
    "truncate_latents",
]
