"""Identity losses on classifier logits, with closed-form gradients.

Two optimization targets are supported: plain cross-entropy on softmax
scores, and a hyperbolic loss that measures the Poincare distance between
the L1-normalized logit vector and a near-one-hot target placed close to
the ball boundary.  Cross-entropy gradients shrink linearly as the target
score approaches one (the L1 logit-gradient norm equals 2 * (1 - y_c)),
while the Poincare distance keeps a usable gradient because the target
sits almost on the boundary where distances blow up.

All gradients here are analytic; no autodiff is involved anywhere.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import ContractViolationError, DegenerateInputError
from .types import check_class_index, check_logits

# Numerical guards for the Poincare loss.
EPS_BALL = 1e-6    # keep ||u||_2^2 at least this far below 1
EPS_ARG = 1e-12    # keep the arcosh argument above 1 + EPS_ARG in the gradient
EPS_NORM = 1e-12   # smallest usable L1 norm of the logits
TARGET_ONE = 0.9999  # stand-in for 1 in the target vector, keeps v inside the ball


def softmax(o) -> np.ndarray:
    """Numerically stable softmax over a 1-D logit vector."""
    o = check_logits(o)
    shifted = o - o.max()
    e = np.exp(shifted)
    return e / e.sum()


def target_vector(num_classes: int, class_index: int, variant: str = "poincare") -> np.ndarray:
    """One-hot target for `class_index`.

    The "poincare" variant writes TARGET_ONE instead of 1 so the target
    stays strictly inside the unit ball; "one_hot" writes an exact 1.
    """
    if num_classes < 2:
        raise ContractViolationError("need at least 2 classes")
    c = check_class_index(class_index, num_classes)
    if variant not in ("poincare", "one_hot"):
        raise ContractViolationError(f"unknown target variant {variant!r}")
    v = np.zeros(num_classes, dtype=np.float64)
    v[c] = TARGET_ONE if variant == "poincare" else 1.0
    return v


def cross_entropy(o, class_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(o) against class `class_index`.

    Returns (loss, grad) where grad is the exact logit gradient y - t.
    """
    o = check_logits(o)
    c = check_class_index(class_index, len(o))
    shifted = o - o.max()
    lse = math.log(float(np.exp(shifted).sum()))
    loss = lse - float(shifted[c])
    grad = softmax(o)
    grad[c] -= 1.0
    return loss, grad


def ce_gradient_magnitude_curve(target_scores) -> list[float]:
    """Magnitude of the cross-entropy gradient at the target logit, per score.

    The target-logit component of y - t is y_c - 1, so the magnitude is
    1 - y_c: it shrinks to zero as the score saturates. (The full L1 norm is
    2 * (1 - y_c); either way the optimization signal dies near y_c = 1.)
    """
    out = []
    for y in np.asarray(target_scores, dtype=np.float64).ravel():
        if not np.isfinite(y) or not 0.0 < y < 1.0:
            raise ContractViolationError(f"target score {y} not in (0, 1)")
        out.append(1.0 - float(y))
    return out


def poincare_distance(u, v) -> float:
    """Distance between two points of the open unit ball.

    d(u, v) = arcosh(1 + 2 ||u - v||^2 / ((1 - ||u||^2) (1 - ||v||^2)))

    Squared norms are clamped to 1 - EPS_BALL, so points on or slightly
    outside the boundary give a large but finite distance.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ContractViolationError("poincare_distance expects two 1-D vectors of equal length")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ContractViolationError("non-finite input to poincare_distance")
    alpha = 1.0 - min(float(u @ u), 1.0 - EPS_BALL)
    beta = 1.0 - min(float(v @ v), 1.0 - EPS_BALL)
    diff = u - v
    gamma = 1.0 + 2.0 * float(diff @ diff) / (alpha * beta)
    return float(np.arccosh(max(gamma, 1.0)))


class PoincareResult(NamedTuple):
    loss: float
    grad_o: np.ndarray
    boundary_clamped: bool  # true when ||u||_2^2 had to be pulled back into the ball


def poincare_loss(o, class_index: int) -> PoincareResult:
    """Poincare distance between normalized logits and the adjusted one-hot target.

    With u = o / ||o||_1 and v the target vector carrying TARGET_ONE at the
    target class, the loss is arcosh(gamma) for

        gamma = 1 + 2 ||u - v||^2 / (alpha * beta),
        alpha = 1 - ||u||_2^2,  beta = 1 - ||v||_2^2.

    The gradient follows the chain rule through the normalization:

        dL/du = 4 / (beta * sqrt(gamma^2 - 1)) * (alpha (u - v) + u ||u - v||^2) / alpha^2
        dL/do_k = (dL/du_k - sign(o_k) * <dL/du, u>) / ||o||_1

    with the subgradient convention sign(0) = 0.  Guards: ||u||_2^2 is
    clamped to at most 1 - EPS_BALL (flagged in the result), and the arcosh
    argument used for the gradient is kept at least 1 + EPS_ARG so the
    derivative stays finite.  At u == v exactly the gradient is the zero
    vector.
    """
    o = check_logits(o)
    c = check_class_index(class_index, len(o))
    l1 = float(np.abs(o).sum())
    if l1 <= EPS_NORM:
        raise DegenerateInputError("logit vector has (near-)zero L1 norm")

    u = o / l1
    v = target_vector(len(o), c, "poincare")

    sq_u = float(u @ u)
    clamped = sq_u > 1.0 - EPS_BALL
    alpha = 1.0 - min(sq_u, 1.0 - EPS_BALL)
    beta = 1.0 - float(v @ v)
    diff = u - v
    d2 = float(diff @ diff)
    gamma = 1.0 + 2.0 * d2 / (alpha * beta)
    loss = float(np.arccosh(max(gamma, 1.0)))

    if d2 == 0.0:
        return PoincareResult(loss, np.zeros_like(o), clamped)

    gamma_g = max(gamma, 1.0 + EPS_ARG)
    dl_du = (4.0 / (beta * math.sqrt(gamma_g * gamma_g - 1.0))) * (
        (alpha * diff + u * d2) / (alpha * alpha)
    )
    grad_o = (dl_du - np.sign(o) * float(dl_du @ u)) / l1
    return PoincareResult(loss, grad_o, clamped)


def _softplus(z: float) -> float:
    # log(1 + exp(z)) without overflow
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def discriminator_penalty(d_logit: float, weight: float) -> float:
    """Realism penalty weight * softplus(-d_logit) for a discriminator logit."""
    if not np.isfinite(d_logit):
        raise ContractViolationError("discriminator logit must be finite")
    if not np.isfinite(weight) or weight < 0.0:
        raise ContractViolationError("penalty weight must be finite and non-negative")
    return weight * _softplus(-float(d_logit))


def discriminator_penalty_gradient(d_logit: float, weight: float) -> float:
    """d/d(d_logit) of discriminator_penalty: -weight * sigmoid(-d_logit)."""
    if not np.isfinite(d_logit):
        raise ContractViolationError("discriminator logit must be finite")
    if not np.isfinite(weight) or weight < 0.0:
        raise ContractViolationError("penalty weight must be finite and non-negative")
    z = -float(d_logit)
    # sigmoid without overflow
    sig = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return -weight * sig
