"""Analytic reference models: image prior, target classifier, discriminator."""

from .base import DifferentiableModel, LinearModel, input_gradient
from .classifier import PooledFeatureMap, PrototypeClassifier, classify
from .discriminator import SmoothnessDiscriminator
from .generator import (
    BlobGenerator,
    map_latent,
    map_latent_batch,
    synthesize,
    truncate_latents,
)
from .io import load_model, save_model

__all__ = [
    "BlobGenerator",
    "DifferentiableModel",
    "LinearModel",
    "PooledFeatureMap",
    "PrototypeClassifier",
    "SmoothnessDiscriminator",
    "classify",
    "input_gradient",
    "load_model",
    "map_latent",
    "map_latent_batch",
    "save_model",
    "synthesize",
    "truncate_latents",
]
