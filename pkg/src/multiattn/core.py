"""Dense float64 tensors, named parameters, and a deterministic seeded RNG."""

from __future__ import annotations

import math

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes):
        pretty = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class NonFiniteError(ValueError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed dataset content or an out-of-vocabulary token."""


def as_f64(values, what: str = "tensor") -> np.ndarray:
    """Convert to a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values (shape {arr.shape})")
    return arr


class Tensor:
    """Dense n-dimensional array of 64-bit floats, row-major.

    A thin value-semantic wrapper around a C-contiguous numpy array. NaN and
    Inf are rejected at construction: non-finite values anywhere in the
    numeric core are a contract violation, not a representable state.
    """

    __slots__ = ("array",)

    def __init__(self, values):
        self.array = as_f64(values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter:
    """Named trainable leaf tensor.

    The underlying array is updated in place by the optimizer; graphs built
    afterwards see the new values.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, values, trainable: bool = True):
        self.name = name
        self.value = as_f64(values, f"parameter {name!r}")
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SeededRng:
    """Deterministic 64-bit PRNG (splitmix64).

    State advances by a fixed odd increment and each output is the splitmix64
    finalizer of the new state:

        state += 0x9E3779B97F4A7C15                 (mod 2^64)
        z = state
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9    (mod 2^64)
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB    (mod 2^64)
        output = z ^ (z >> 31)

    Pure integer arithmetic, so equal seeds give bit-identical streams on
    every platform. Doubles are drawn as (output >> 11) * 2**-53.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0 ** -53
        return low + (high - low) * u

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Derived from a 53-bit double; the
        resulting bias of O(n / 2^53) is irrelevant at this scale."""
        if n <= 0:
            raise ValueError(f"randint requires n >= 1, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def split(self) -> "SeededRng":
        """Derive an independent child stream."""
        return SeededRng(self.next_u64())

    def uniform_array(self, shape: tuple[int, ...], low: float, high: float) -> np.ndarray:
        total = 1
        for s in shape:
            total *= s
        flat = np.empty(total, dtype=np.float64)
        for i in range(total):
            flat[i] = self.uniform(low, high)
        return flat.reshape(shape)


def glorot_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """Uniform(-r, r) with r = sqrt(6 / (rows + cols))."""
    r = math.sqrt(6.0 / (rows + cols))
    return rng.uniform_array((rows, cols), -r, r)


def matrix_param(rng: SeededRng, name: str, rows: int, cols: int) -> Parameter:
    return Parameter(name, glorot_matrix(rng, rows, cols))


def vector_param(rng: SeededRng, name: str, size: int) -> Parameter:
    """Scoring vectors start at zero so every attention distribution begins
    exactly uniform; a peaked random start lets one encoder starve the others
    of gradient before they can learn. The rng argument keeps the call
    signature uniform with the matrix initializers."""
    del rng
    return Parameter(name, np.zeros(size, dtype=np.float64))


def zeros_param(name: str, shape) -> Parameter:
    return Parameter(name, np.zeros(shape, dtype=np.float64))
