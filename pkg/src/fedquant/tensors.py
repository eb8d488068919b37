"""Dense float64 tensor helpers.

numpy supplies storage and kernels; the functions here pin the dtype, check
shapes up front and keep every public result finite. Rank is limited to 2
(matrices and vectors) since the simulator only trains MLPs.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


def as_tensor(data, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Copy arbitrary numeric input into a fresh float64 array."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} tensors are not supported")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two rank-2 tensors with explicit shape checking."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 inputs, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def flatten_all(arrays: list[np.ndarray]) -> np.ndarray:
    """Concatenate raveled tensors into one flat float64 vector."""
    return np.concatenate([np.ravel(a) for a in arrays]).astype(np.float64, copy=False)
