"""Immutable dense 64-bit float matrices."""
from __future__ import annotations

from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.errors import NumericOverflowError


def as_readonly(values: ArrayLike) -> np.ndarray:
    """Returns a read-only, 2-dimensional float64 copy of `values`.

    Scalars become 1x1 matrices and vectors become a single row.
    """
    array = np.array(values, dtype=np.float64, copy=True)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got an array of shape {array.shape}")
    array.setflags(write=False)
    return array


class Matrix:
    """A `rows x cols` matrix of finite float64 values, immutable once created.

    >>> m = Matrix([[1.0, 2.0], [3.0, 4.0]])
    >>> m.shape
    (2, 2)
    >>> m.values.flags.writeable
    False
    """

    __slots__ = ("_values",)

    def __init__(self, data: ArrayLike | Matrix):
        if isinstance(data, Matrix):
            self._values = data._values
            return
        values = as_readonly(data)
        if not np.all(np.isfinite(values)):
            raise NumericOverflowError("Matrix", "matrix entries must be finite")
        self._values = values

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Matrix:
        return cls(np.zeros((rows, cols)))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def rows(self) -> int:
        return self._values.shape[0]

    @property
    def cols(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __array__(self, dtype: Any = None, copy: Any = None) -> np.ndarray:
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._values, other._values))

    def __hash__(self) -> int:
        return hash((self.shape, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"Matrix(rows={self.rows}, cols={self.cols})"
