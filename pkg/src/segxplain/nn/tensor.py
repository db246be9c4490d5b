"""Dense row-major real tensors.

The runtime computes on plain numpy arrays; ``Tensor`` is the thin value type
used at module boundaries. Two precisions exist: real32 for runtime training
and real64 for numerical tests (gradient checks).
"""

import numpy as np

REAL32 = np.float32
REAL64 = np.float64
_REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_array(values, dtype=None) -> np.ndarray:
    """Coerce ``values`` (Tensor, ndarray or nested lists) to a real ndarray."""
    if isinstance(values, Tensor):
        arr = values.array
    else:
        arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _REAL_DTYPES:
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    """An n-dimensional real array with explicit shape/precision accessors."""

    __slots__ = ("array",)

    def __init__(self, values, precision=None):
        self.array = as_array(values, dtype=precision)

    @property
    def shape(self) -> tuple:
        return tuple(int(d) for d in self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.array.reshape(-1)

    @property
    def precision(self) -> str:
        return "real64" if self.array.dtype == np.float64 else "real32"

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.array, precision=dtype)

    def assert_finite(self, context: str = "tensor") -> None:
        if not np.all(np.isfinite(self.array)):
            raise FloatingPointError(f"non-finite values in {context}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, precision={self.precision})"
