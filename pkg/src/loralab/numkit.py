"""Deterministic dense linear algebra, seeded randomness, and gradient checking.

Every tensor in this package is a "matrix": a 2-D, C-contiguous numpy array of
64-bit floats. 64-bit precision is non-negotiable here because the analytic
backward passes are gated against central finite differences at 1e-6 relative
tolerance, which 32-bit arithmetic cannot support.

matmul uses exact triple-loop semantics with a fixed summation order (the
contraction index innermost, ascending). That makes every product
bit-reproducible run to run and machine to machine, which the downstream
training and checkpoint tests rely on. The hot path is a compiled kernel that
was verified bitwise-equal to the scalar loop; a pure-numpy fallback with the
same summation order is used if the compiler is unavailable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


class ShapeError(ValueError):
    """Raised when an operand's dimensions violate an operation's contract."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces or encounters non-finite values."""


def matrix(values) -> np.ndarray:
    """Build a matrix (2-D float64 C-order array) from nested sequences."""
    out = np.array(values, dtype=np.float64, order="C")
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise ShapeError(f"matrix data must be 2-D, got {out.ndim}-D")
    return out


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate that x is usable as a matrix, coercing dtype/layout if needed."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.float64 or not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
    return arr


def require_finite(x: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{name} contains non-finite entries")
    return x


if _HAVE_NUMBA:

    @njit(cache=True, fastmath=False)
    def _mm_kernel(a, b, out):  # pragma: no cover - compiled
        m, k = a.shape
        n = b.shape[1]
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for kk in range(k):
                    acc += a[i, kk] * b[kk, j]
                out[i, j] = acc


def _mm_fallback(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    # Outer-product accumulation adds the same terms in the same (ascending k)
    # order per output element as the scalar loop, so it is bitwise-identical.
    for kk in range(a.shape[1]):
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]


def matmul(a, b) -> np.ndarray:
    """Matrix product with fixed k-innermost ascending summation order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: a is {a.shape}, b is {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    if _HAVE_NUMBA:
        _mm_kernel(a, b, out)
    else:
        _mm_fallback(a, b, out)
    return out


def row_softmax(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = as_matrix(m, "m")
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, entry by entry."""
    x = as_matrix(x, "x")
    grad = np.zeros_like(x)
    work = x.copy()
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            orig = work[i, j]
            work[i, j] = orig + h
            up = float(f(work))
            work[i, j] = orig - h
            down = float(f(work))
            work[i, j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(
                    f"objective returned a non-finite value at perturbed entry ({i}, {j})"
                )
            grad[i, j] = (up - down) / (2.0 * h)
    return grad


class Rng:
    """Seeded random source backed by the Philox 4x64 counter-based generator.

    Philox is a documented, platform-independent algorithm; it is deliberately
    not the host library's default generator, so identical (seed, stream)
    pairs produce identical draw sequences everywhere. The stream argument
    gives independent substreams off one experiment seed.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array(
            [self.seed % (1 << 64), self.stream % (1 << 64)], dtype=np.uint64
        )
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return std * self._gen.standard_normal((rows, cols))

    def uniform(self, rows: int, cols: int, low: float, high: float) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols))

    def random(self, rows: int, cols: int) -> np.ndarray:
        """Uniform draws in [0, 1), used for dropout masks."""
        return self._gen.random((rows, cols))

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)
