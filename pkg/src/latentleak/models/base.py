"""Model contract: forward pass plus a vector-Jacobian product.

Attack code never differentiates models itself; it hands a cotangent in
output space to the model and receives the pulled-back gradient in input
space.  That keeps every model free to implement its gradient analytically.
"""

from __future__ import annotations

import abc

import numpy as np

from ..errors import ContractViolationError


class DifferentiableModel(abc.ABC):
    """Deterministic map with an analytic vector-Jacobian product."""

    @abc.abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the model on one input."""

    @abc.abstractmethod
    def input_gradient(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull back `cotangent` (same shape as forward(x)) to input space."""


def input_gradient(model: DifferentiableModel, x, cotangent) -> np.ndarray:
    """Free-function form of the vector-Jacobian product contract."""
    ct = np.asarray(cotangent, dtype=np.float64)
    if not np.all(np.isfinite(ct)):
        raise ContractViolationError("cotangent contains NaN or Inf")
    return model.input_gradient(x, ct)


class LinearModel(DifferentiableModel):
    """Reference model y = A @ flatten(x); gradient is A^T @ cotangent."""

    def __init__(self, matrix: np.ndarray, input_shape: tuple[int, ...]):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        if self.matrix.ndim != 2:
            raise ContractViolationError("matrix must be 2-D")
        if self.matrix.shape[1] != int(np.prod(self.input_shape)):
            raise ContractViolationError("matrix width must match flattened input size")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise ContractViolationError(f"expected input shape {self.input_shape}")
        return self.matrix @ x.ravel()

    def input_gradient(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        ct = np.asarray(cotangent, dtype=np.float64)
        if ct.shape != (self.matrix.shape[0],):
            raise ContractViolationError("cotangent shape does not match model output")
        return (self.matrix.T @ ct).reshape(self.input_shape)
