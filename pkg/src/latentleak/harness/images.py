"""8-bit PNG persistence for [-1, 1] float images, plus grid assembly."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..errors import ContractViolationError


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to bytes by round((x + 1) * 127.5)."""
    return np.clip(np.round((np.asarray(x, dtype=float) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=float) / 127.5 - 1.0


def save_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ContractViolationError(f"expected an (H, W, C) image with 1 or 3 channels, got {arr.shape}")
    data = to_uint8(arr)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_uint8(data)


def image_grid(images: np.ndarray, columns: int = 10, pad: int = 2, fill: float = -1.0) -> np.ndarray:
    """Row-major montage of a (B, H, W, C) stack with `pad` pixels between cells."""
    stack = np.asarray(images, dtype=float)
    if stack.ndim != 4 or stack.shape[0] == 0:
        raise ContractViolationError(f"expected a non-empty (B, H, W, C) stack, got {stack.shape}")
    b, h, w, c = stack.shape
    columns = max(1, min(columns, b))
    rows = -(-b // columns)
    grid = np.full(
        (rows * h + (rows - 1) * pad, columns * w + (columns - 1) * pad, c), fill, dtype=float
    )
    for i in range(b):
        r, q = divmod(i, columns)
        y, x = r * (h + pad), q * (w + pad)
        grid[y:y + h, x:x + w] = stack[i]
    return grid
