"""Dense tensor value and trainable parameter types.

Tensors are immutable row-major float arrays (float32 for compute,
float64 for gradient verification). Parameters pair a value with a
gradient buffer and a trainable flag; frozen parameters keep a zero
gradient forever.
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when an operation's shape algebra rejects its inputs."""


class Tensor:
    """Immutable dense array: shape plus contiguous row-major data."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
                arr = arr.astype(np.float32 if dtype is None else dtype)
            else:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        # own a copy: freezing must never alias caller-held buffers
        arr = np.array(arr, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Internal constructor for op-owned outputs; skips the finiteness scan."""
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        arr = arr.view()
        arr.flags.writeable = False
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self._data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self._data.dtype.name})"


class Parameter:
    """A tensor value with a gradient slot and a trainable flag."""

    __slots__ = ("value", "gradient", "trainable", "name")

    def __init__(self, value, trainable: bool = True, name: str = ""):
        v = value if isinstance(value, Tensor) else Tensor(value)
        self.value = v
        self.gradient = Tensor._wrap(np.zeros(v.shape, dtype=v.dtype))
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.gradient = Tensor._wrap(np.zeros(self.value.shape, dtype=self.value.dtype))

    def assign(self, arr: np.ndarray) -> None:
        """Replace the value in a training step; shape and dtype are fixed."""
        if tuple(arr.shape) != self.value.shape:
            raise ShapeError(f"parameter {self.name!r}: cannot assign shape {arr.shape} over {self.value.shape}")
        self.value = Tensor._wrap(np.asarray(arr, dtype=self.value.dtype))

    def __repr__(self):
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"


def as_array(x) -> np.ndarray:
    """Unwrap a Tensor or Parameter to its ndarray; pass ndarrays through."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, Parameter):
        return x.value.data
    return np.asarray(x)
