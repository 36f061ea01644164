"""Dense float-matrix helpers: products, stable reductions, seeded randomness.

Everything operates on plain numpy arrays (row-major; float64 by default,
float32 supported for faster training). All functions are pure. ``Rng`` is
the only stateful object here and it mutates nothing but itself.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "ShapeError",
    "Rng",
    "matmul",
    "sigmoid",
    "tanh",
    "softmax_stable",
    "log_softmax",
    "log_sum_exp",
    "uniform_init",
    "clip_global_norm",
]

_U64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Rng:
    """Deterministic xorshift64* generator, bit-reproducible across platforms.

    The state is a single nonzero 64-bit word, derived from the seed by one
    splitmix64 scramble. Each draw applies

        x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27        (mod 2**64)

    and returns ``x * 0x2545F4914F6CDD1D mod 2**64``. Floats in [0, 1) take
    the top 53 bits of that product.
    """

    _MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        z = (self.seed + 0x9E3779B97F4A7C15) & _U64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        z ^= z >> 31
        self._state = z or 0x9E3779B97F4A7C15  # xorshift must never sit at 0

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _U64
        x ^= x >> 27
        self._state = x
        return (x * self._MULT) & _U64

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection sampling."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = (_U64 + 1) - (_U64 + 1) % n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randrange(i + 1)
            seq[i], seq[j] = seq[j], seq[i]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-d matrices with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    """Elementwise logistic function, overflow-safe via the tanh identity."""
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(x):
    """Elementwise hyperbolic tangent."""
    return np.tanh(np.asarray(x))


def softmax_stable(logits, axis: int = -1) -> np.ndarray:
    """Softmax computed with max-subtraction so large logits cannot overflow.

    Entries equal to -inf get weight exactly 0; at least one entry per row
    must be finite. Output rows are positive and sum to 1.
    """
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """log(softmax(logits)) without forming the exponentials' ratio."""
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ValueError("log_softmax of an empty vector")
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def log_sum_exp(v, axis: int = -1):
    """log(sum(exp(v))) factored through the max, stable for large magnitudes."""
    z = np.asarray(v, dtype=float)
    if z.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return out if out.ndim else float(out)


def uniform_init(rng: Rng, rows: int, cols: int, lo: float = -0.1, hi: float = 0.1,
                 dtype=np.float64) -> np.ndarray:
    """rows x cols matrix of i.i.d. uniform draws in [lo, hi), row-major order."""
    if not lo < hi:
        raise ValueError(f"uniform_init needs lo < hi, got lo={lo} hi={hi}")
    span = hi - lo
    scale = 2.0**-53
    data = [lo + span * ((rng.next_u64() >> 11) * scale) for _ in range(rows * cols)]
    return np.array(data, dtype=dtype).reshape(rows, cols)


def clip_global_norm(grads, max_norm: float):
    """Jointly rescale gradient arrays so their global L2 norm is <= max_norm.

    Returns (list of arrays, factor). When the norm is already within bounds
    the input arrays are returned untouched with factor 1.0.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total_sq = 0.0
    for g in grads:
        total_sq += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total_sq)
    if norm <= max_norm or norm == 0.0:
        return list(grads), 1.0
    factor = max_norm / norm
    return [g * factor for g in grads], factor
