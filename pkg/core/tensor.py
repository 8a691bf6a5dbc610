"""
Dense Tensor Value Type
=======================

Immutable n-dimensional arrays of real scalars: images, feature maps, weights
and gradients all travel through the engine as ``Tensor`` values. Storage is a
contiguous row-major numpy buffer flagged read-only after construction.

Training runs in 32-bit floats; gradient verification switches the whole engine
to 64-bit with the ``precision`` context manager.
"""

import contextlib
import logging
from typing import Iterator, Sequence, Tuple, Union

import numpy as np

from .exceptions import InvalidArgumentError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPES = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}

_default_dtype = DTYPES["float32"]


def default_dtype() -> np.dtype:
    """Return the dtype new tensors are created with."""
    return _default_dtype


def set_precision(name: str) -> None:
    """Switch the engine-wide precision ('float32' or 'float64')."""
    global _default_dtype
    if name not in DTYPES:
        raise InvalidArgumentError(f"unknown precision {name!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[np.dtype]:
    """Temporarily run the engine at the given precision."""
    previous = _default_dtype.name
    set_precision(name)
    try:
        yield _default_dtype
    finally:
        set_precision(previous)


ArrayLike = Union[np.ndarray, Sequence, float, int, "Tensor"]


class Tensor:
    """
    Immutable dense array.

    ``product(shape) == len(data)`` always holds; ``reshape`` returns a new
    Tensor sharing the (read-only) buffer.
    """

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike, dtype=None):
        if isinstance(data, Tensor):
            data = data._data
        target = np.dtype(dtype) if dtype is not None else _default_dtype
        if target not in DTYPES.values():
            raise InvalidArgumentError(f"unsupported tensor dtype {target}")
        array = np.array(data, dtype=target, order="C", copy=True)
        array.setflags(write=False)
        self._data = array

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        # Takes ownership without copying; callers pass freshly computed arrays.
        tensor = cls.__new__(cls)
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        array.setflags(write=False)
        tensor._data = array
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=None) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=dtype or _default_dtype))

    @classmethod
    def ones(cls, shape: Sequence[int], dtype=None) -> "Tensor":
        return cls._wrap(np.ones(tuple(shape), dtype=dtype or _default_dtype))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeMismatchError("item", "one element", self.shape)
        return float(self._data.reshape(-1)[0])

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            view = self._data.reshape(shape)
        except ValueError as exc:
            raise ShapeMismatchError("reshape", f"{self.size} elements", shape) from exc
        return Tensor._wrap(view)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def equal(self, other: "Tensor") -> bool:
        """Bit-exact comparison of dtype, shape and contents."""
        return (
            isinstance(other, Tensor)
            and self.dtype == other.dtype
            and self.shape == other.shape
            and self._data.tobytes() == other._data.tobytes()
        )

    def __len__(self) -> int:
        return self.shape[0] if self.ndim else 1

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(value: ArrayLike) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else wrap a copy."""
    return value if isinstance(value, Tensor) else Tensor(value)
