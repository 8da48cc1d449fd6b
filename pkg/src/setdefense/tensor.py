"""Dense float64 tensor with an optional gradient slot.

A thin wrapper over a numpy buffer: every public pipeline surface (images,
model parameters, attack outputs) speaks Tensor, while the heavy math inside
the network runs directly on the wrapped arrays.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class TensorError(ValueError):
    pass


class Tensor:
    """Row-major float64 array with an optional aligned gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: Optional[np.ndarray] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        self.data = np.ascontiguousarray(arr)
        if grad is not None:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise TensorError(
                    f"grad shape {grad.shape} does not match value shape {self.data.shape}"
                )
            grad = np.ascontiguousarray(grad)
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"

    @staticmethod
    def zeros(shape: Sequence[int]) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=np.float64))


def as_array(x) -> np.ndarray:
    """Accept a Tensor or array-like; return the finite float64 ndarray."""
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorError("input values must be finite")
    return arr
