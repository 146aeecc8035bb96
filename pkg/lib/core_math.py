"""Activations, singular values and the seeded random source shared by every other module."""
from __future__ import annotations
import logging
import math
from typing import Literal, overload
import numpy as np
import numpy.typing as npt
from lib.mtae_types import ActivationKind, FloatArray, IntArray

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
JACOBI_TOLERANCE = 1e-12
MAX_JACOBI_SWEEPS = 100


class NonFiniteError(ValueError):
    """Raised when a NaN or an infinity reaches a numerical routine."""


def check_finite(values: npt.ArrayLike, message: str) -> None:
    """Raise `NonFiniteError` with `message` unless every value is finite."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(message)


@overload
def activation(a: float, kind: ActivationKind | str) -> float: ...


@overload
def activation(a: FloatArray, kind: ActivationKind | str) -> FloatArray: ...


def activation(a: float | FloatArray, kind: ActivationKind | str) -> float | FloatArray:
    """
    Apply a nonlinearity elementwise.

    :param a: The pre-activation, a scalar or an array.
    :param kind: `sigmoid`, `relu` or `linear`.
    :return: The activation, with the same shape as `a`.
    """
    check_finite(a, "non-finite activation input")
    kind = ActivationKind(kind)
    if kind == ActivationKind.SIGMOID:
        with np.errstate(over="ignore"):
            result = 1.0 / (1.0 + np.exp(-np.asarray(a, dtype=np.float64)))
    elif kind == ActivationKind.RELU:
        result = np.maximum(0.0, a)
    else:
        result = np.asarray(a, dtype=np.float64)
    return float(result) if np.ndim(result) == 0 else result


@overload
def activation_derivative(a: float, kind: ActivationKind | str) -> float: ...


@overload
def activation_derivative(a: FloatArray, kind: ActivationKind | str) -> FloatArray: ...


def activation_derivative(a: float | FloatArray, kind: ActivationKind | str) -> float | FloatArray:
    """Derivative of `activation` with respect to its input, evaluated at `a`."""
    check_finite(a, "non-finite activation input")
    kind = ActivationKind(kind)
    if kind == ActivationKind.SIGMOID:
        s = activation(np.asarray(a, dtype=np.float64), kind)
        result = s * (1.0 - s)
    elif kind == ActivationKind.RELU:
        result = (np.asarray(a) > 0).astype(np.float64)
    else:
        result = np.ones_like(np.asarray(a, dtype=np.float64))
    return float(result) if np.ndim(result) == 0 else result


def _jacobi_eigenvalues(gram: FloatArray) -> FloatArray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(gram, dtype=np.float64)
    n = a.shape[0]
    tolerance = JACOBI_TOLERANCE * abs(float(np.trace(a)))
    for sweep in range(MAX_JACOBI_SWEEPS):
        off_diagonal = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off_diagonal <= tolerance:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    else:
        logger.warning(f"Jacobi eigen-solver stopped after {MAX_JACOBI_SWEEPS} sweeps without converging.")
    logger.debug(f"Jacobi eigen-solver used {sweep + 1} sweeps on a {n}x{n} matrix.")
    return np.diag(a).copy()


def singular_values(m: FloatArray, method: Literal["lapack", "jacobi"] = "lapack") -> FloatArray:
    """
    Singular values of a matrix in descending order.

    :param m: A non-empty 2-D array.
    :param method: `jacobi` diagonalises the smaller Gram matrix (mᵀm or mmᵀ) with cyclic Jacobi
        rotations; `lapack` delegates to numpy. Both give the same values.
    :return: A vector of length min(rows, cols), non-negative and non-increasing.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"singular values need a non-empty matrix, got shape {m.shape}")
    check_finite(m, "non-finite matrix entry")

    if method == "lapack":
        values = np.linalg.svd(m, compute_uv=False)
    elif method == "jacobi":
        gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
        values = np.sqrt(np.clip(_jacobi_eigenvalues(gram), 0.0, None))
    else:
        raise ValueError(f"unknown singular value method `{method}`")
    return np.sort(values)[::-1].copy()


def _mix64(z: int) -> int:
    """Splitmix64 finalizer on a Python integer."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: npt.NDArray[np.uint64]) -> npt.NDArray[np.uint64]:
    """Splitmix64 finalizer on an array; uint64 arithmetic wraps modulo 2^64."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class RandomSource:
    """
    A counter-based splitmix64 generator.

    Draw k (k = 1, 2, ...) is mix64(seed + k * 0x9E3779B97F4A7C15), so a block of draws is
    computed at once and matches drawing the same values one at a time. Not safe to share
    between threads or processes; give each worker its own `fork`.
    """

    def __init__(self, seed: int) -> None:
        """:param seed: Any integer. It is reduced modulo 2^64."""
        self.seed = seed & MASK64
        self.counter = 0

    def __repr__(self) -> str:
        """Show the seed and how many values were drawn."""
        return f"RandomSource(seed={self.seed}, counter={self.counter})"

    def next_uint64(self, n: int) -> npt.NDArray[np.uint64]:
        """Draw `n` raw 64-bit outputs."""
        if n < 0:
            raise ValueError(f"cannot draw {n} values")
        steps = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + steps * np.uint64(GOLDEN_GAMMA)
        self.counter += n
        return _mix64_array(z)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | tuple[int, ...] = 1) -> FloatArray:
        """Draw uniform doubles in [lo, hi) from the top 53 bits of each output."""
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ValueError(f"invalid uniform range [{lo}, {hi})")
        shape = (size,) if isinstance(size, int) else size
        count = math.prod(shape)
        unit = (self.next_uint64(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return (lo + (hi - lo) * unit).reshape(shape)

    def permutation(self, n: int) -> IntArray:
        """A uniformly random ordering of 0..n-1."""
        return np.argsort(self.uniform(size=n), kind="stable").astype(np.int64)

    def normal(self, size: int | tuple[int, ...] = 1) -> FloatArray:
        """Standard normal draws by the Box-Muller transform (two uniforms per value)."""
        shape = (size,) if isinstance(size, int) else size
        count = math.prod(shape)
        u1 = 1.0 - self.uniform(size=count)
        u2 = self.uniform(size=count)
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)).reshape(shape)

    def bernoulli_mask(self, size: int | tuple[int, ...], p: float) -> FloatArray:
        """A 0/1 array whose entries are 1 with probability `p`."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} is outside [0, 1]")
        return (self.uniform(size=size) < p).astype(np.float64)

    def fork(self, index: int) -> RandomSource:
        """An independent source derived from this seed and `index` (not from the draws made so far)."""
        return RandomSource(_mix64(self.seed ^ _mix64((index + 1) & MASK64)))


def rand_uniform(r: RandomSource, lo: float, hi: float) -> float:
    """One uniform draw in [lo, hi)."""
    return float(r.uniform(lo, hi)[0])


def rand_permutation(r: RandomSource, n: int) -> list[int]:
    """A random bijection on 0..n-1 as a list."""
    return [int(i) for i in r.permutation(n)]


def rand_bernoulli_mask(r: RandomSource, n: int, p: float) -> FloatArray:
    """A binary vector of length `n` whose entries are 1 with probability `p`."""
    return r.bernoulli_mask(n, p)
