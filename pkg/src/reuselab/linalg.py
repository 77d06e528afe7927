"""Minimal dense real linear algebra used by the rest of the package.

All computation is float64. The heavy lifting (products, reductions) is
delegated to numpy; the spectral-norm routine is a hand-rolled power
iteration so its tolerance and determinism are under our control.

Two layers of API live here:

* array kernels (``softmax_rows``, ``normalize_rows_sqrt_d``) operating on
  plain ``np.ndarray``; the model and reuse code call these directly.
* ``Matrix``-level operations (``matmul``, ``row_softmax``, ...) that
  validate shapes/finiteness on the way in and out.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateInputError, DimensionError, SingularMatrixError

# Fixed stream for the power-iteration start vector: results must not change
# from run to run.
_POWER_ITER_SEED = 0x5EED
_POWER_ITER_RTOL = 1e-12
_POWER_ITER_MAX_STEPS = 100_000

# Below sigma_min < _RANK_RTOL * sigma_max the matrix is treated as rank
# deficient.
_RANK_RTOL = 1e-12


class Matrix:
    """Dense real matrix, row-major, 64-bit floats, all entries finite."""

    __slots__ = ("_a",)

    def __init__(self, values) -> None:
        a = np.ascontiguousarray(values, dtype=np.float64)
        if a.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got ndim={a.ndim}")
        if a.size and not np.isfinite(a).all():
            raise DegenerateInputError("matrix entries must be finite")
        self._a = a

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def array(self) -> np.ndarray:
        """The underlying 2-D float64 array (read as shared, do not mutate)."""
        return self._a

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self._a.reshape(-1)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def _as_array(m) -> np.ndarray:
    """Accept a Matrix or anything array-like; return a float64 2-D array."""
    if isinstance(m, Matrix):
        return m.array
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got ndim={a.ndim}")
    return a


# ---------------------------------------------------------------------------
# array kernels
# ---------------------------------------------------------------------------

def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def normalize_rows_sqrt_d(a: np.ndarray) -> np.ndarray:
    """Rescale every row to Euclidean norm sqrt(cols).

    Raises:
        DegenerateInputError: if any row is exactly zero.
    """
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    return a * (math.sqrt(a.shape[1]) / norms)[:, None]


# ---------------------------------------------------------------------------
# Matrix-level operations
# ---------------------------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a @ b."""
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}"
        )
    return Matrix(a.array @ b.array)


def row_softmax(m: Matrix) -> Matrix:
    """Softmax applied to each row; rows of the result sum to 1."""
    return Matrix(softmax_rows(m.array))


def row_normalize_sqrt_d(m: Matrix) -> Matrix:
    """Rescale each row of m to norm sqrt(m.cols)."""
    return Matrix(normalize_rows_sqrt_d(m.array))


def cosine(u, v) -> float:
    """Cosine of the angle between two vectors, clamped into [-1, 1].

    Computed on pre-normalized copies so that very small or very large
    inputs do not overflow the intermediate dot product.
    """
    ua = np.asarray(u, dtype=np.float64).reshape(-1)
    va = np.asarray(v, dtype=np.float64).reshape(-1)
    if ua.shape != va.shape:
        raise DimensionError(f"vector length mismatch: {ua.size} vs {va.size}")
    nu = np.linalg.norm(ua)
    nv = np.linalg.norm(va)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero vector is undefined")
    # Bitwise-equal inputs have cosine exactly 1; the normalized dot
    # product can round a hair below it, which matters to zero thresholds.
    if np.array_equal(ua, va):
        return 1.0
    c = float(np.dot(ua / nu, va / nv))
    return min(1.0, max(-1.0, c))


def spectral_norm(m) -> float:
    """Largest singular value via power iteration on M^T M.

    Deterministic (fixed-seed start vector); iterates until the Rayleigh
    quotient is stable to better than the documented 1e-10 relative
    tolerance.
    """
    a = _as_array(m)
    if a.size == 0:
        return 0.0
    # Work on the smaller Gram matrix of the two.
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    n = g.shape[0]
    rng = np.random.default_rng(_POWER_ITER_SEED)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(_POWER_ITER_MAX_STEPS):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0  # v in the null space of a PSD Gram matrix => M == 0
        v_new = w / nw
        lam_new = float(v_new @ (g @ v_new))
        if abs(lam_new - lam) <= _POWER_ITER_RTOL * max(lam_new, 1e-300):
            return math.sqrt(max(lam_new, 0.0))
        v, lam = v_new, lam_new
    return math.sqrt(max(lam, 0.0))


def min_singular(m) -> float:
    """Smallest singular value (full column rank required).

    Uses a full small-matrix SVD; desk-scale dimensions (<= 64) make this
    cheap, and the hand-rolled power iteration above stays in charge of
    sigma_max.

    Raises:
        SingularMatrixError: if sigma_min < 1e-12 * sigma_max.
    """
    a = _as_array(m)
    if a.shape[0] < a.shape[1]:
        raise SingularMatrixError(
            f"{a.shape[0]}x{a.shape[1]} matrix cannot have full column rank"
        )
    s = np.linalg.svd(a, compute_uv=False)
    smin = float(s[-1])
    smax = float(s[0])
    if smin < _RANK_RTOL * smax or smax == 0.0:
        raise SingularMatrixError(
            f"rank-deficient matrix: sigma_min={smin:.3e}, sigma_max={smax:.3e}"
        )
    return smin


def condition_kappa(m) -> float:
    """Condition number sigma_max / sigma_min (>= 1).

    sigma_max comes from the power iteration, sigma_min from the SVD; the
    ratio is floored at 1.0 to absorb the <=1e-10 cross-method slack.
    """
    kappa = spectral_norm(m) / min_singular(m)
    return max(kappa, 1.0)


def norm_2_to_inf(m) -> float:
    """The 2->inf operator norm: the maximum Euclidean row norm (exact)."""
    a = _as_array(m)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, axis=1).max())


def norm_2_to_1_upper(m) -> float:
    """Upper bound on the 2->1 operator norm: the sum of row norms.

    The exact 2->1 norm is intractable in general; the sum of row norms
    dominates it, which is the direction the error bounds need.
    """
    a = _as_array(m)
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, axis=1).sum())


def frobenius_norm(m) -> float:
    """Frobenius norm (plumbing helper for the bound constants)."""
    return float(np.linalg.norm(_as_array(m)))
