"""Dense tensor substrate: dtype control, seeded RNG, constructors, elementwise math.

Tensors are plain numpy arrays in N x C x H x W layout (row-major, W innermost).
Rank 1-4 is supported. Two precisions exist: float32 for normal use and a
float64 mode (``precision('float64')``) for finite-difference gradient checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray

_DEFAULT_DTYPE = np.dtype(np.float32)

# When True, constructors and elementwise ops assert finite outputs.
debug_checks = False


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dt


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (e.g. 'float64' for grad checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Rng:
    """Deterministic 64-bit generator (PCG64). Same seed, same stream, any run.

    ``child(*keys)`` derives an independent, reproducible stream from the
    parent seed and integer keys without disturbing the parent's state.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"

    def child(self, *keys: int) -> "Rng":
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        rng = object.__new__(Rng)
        rng.seed = self.seed
        rng._gen = np.random.Generator(np.random.PCG64(seq))
        return rng

    def normal(self, mean: float, std: float, shape: Sequence[int]) -> Tensor:
        return self._gen.normal(mean, std, size=tuple(shape)).astype(default_dtype())

    def uniform(self, low: float, high: float, shape: Sequence[int] = ()) -> Tensor:
        return self._gen.uniform(low, high, size=tuple(shape)).astype(default_dtype())

    def integers(self, low: int, high: int) -> int:
        """One draw from [low, high) as a Python int."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def coin(self, p: float = 0.5) -> bool:
        return bool(self._gen.uniform(0.0, 1.0) < p)


def _validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ShapeError(f"rank must be 1..4, got shape {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got shape {shape}")
    return shape


def _check_finite(x: Tensor) -> Tensor:
    if debug_checks and not np.all(np.isfinite(x)):
        from .errors import NumericalError

        raise NumericalError("non-finite values produced by a tensor op")
    return x


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_validate_shape(shape), dtype=default_dtype())


def ones(shape: Sequence[int]) -> Tensor:
    return np.ones(_validate_shape(shape), dtype=default_dtype())


def full(shape: Sequence[int], value: float) -> Tensor:
    return np.full(_validate_shape(shape), value, dtype=default_dtype())


def randn(shape: Sequence[int], mean: float, std: float, rng: Rng) -> Tensor:
    """Normal(mean, std) samples; deterministic for a fixed seed."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    shape = _validate_shape(shape)
    if std == 0:
        return full(shape, mean)
    return _check_finite(rng.normal(mean, std, shape))


def _binary_shapes_ok(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    # the only sanctioned broadcast: per-channel vector against N,C,H,W
    if (
        a.ndim == 4
        and b.ndim == 4
        and b.shape[1] == a.shape[1]
        and b.shape[2] == b.shape[3] == 1
        and b.shape[0] in (1, a.shape[0])
    ):
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return _check_finite(a + b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return _check_finite(a - b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    return _check_finite(a * b)


def scale(a: Tensor, s: float) -> Tensor:
    return _check_finite(a * a.dtype.type(s))
