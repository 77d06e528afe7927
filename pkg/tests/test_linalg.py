"""Tests for the dense linear-algebra layer.

The spectral quantities are checked against an independent one-sided
Jacobi SVD written here in the test, and matmul against a naive triple
loop, so library and oracle share no code path.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reuselab.errors import (
    DegenerateInputError,
    DimensionError,
    SingularMatrixError,
)
from reuselab.linalg import (
    Matrix,
    condition_kappa,
    cosine,
    frobenius_norm,
    matmul,
    min_singular,
    norm_2_to_1_upper,
    norm_2_to_inf,
    row_normalize_sqrt_d,
    row_softmax,
    spectral_norm,
)


def naive_matmul(a, b):
    """Triple-loop reference product, no numpy dot involved."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def jacobi_singular_values(a, tol=1e-14, max_sweeps=100):
    """One-sided (Hestenes) Jacobi SVD; returns singular values descending.

    Rotates column pairs until all pairs are numerically orthogonal; the
    singular values are then the column norms.
    """
    u = np.array(a, dtype=float)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = u[:, i].copy()
                cj = u[:, j].copy()
                alpha = ci @ ci
                beta = cj @ cj
                gamma = ci @ cj
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (
                    abs(zeta) + math.hypot(1.0, zeta))
                cs = 1.0 / math.hypot(1.0, t)
                sn = cs * t
                u[:, i] = cs * ci - sn * cj
                u[:, j] = sn * ci + cs * cj
        if off <= tol:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


# ---------------------------------------------------------------------------
# Matrix carrier type
# ---------------------------------------------------------------------------

def test_matrix_shape_and_data_layout():
    m = Matrix([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert (m.rows, m.cols) == (3, 2)
    assert m.data.shape == (6,)
    assert list(m.data) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_matrix_rejects_non_2d_and_non_finite():
    with pytest.raises(DimensionError):
        Matrix([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateInputError):
        Matrix([[1.0, float("nan")]])
    with pytest.raises(DegenerateInputError):
        Matrix([[float("inf"), 0.0]])


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity_and_zeros():
    rng = np.random.default_rng(7)
    m = Matrix(rng.standard_normal((3, 3)))
    out = matmul(Matrix.identity(3), m)
    assert np.array_equal(out.array, m.array)
    out = matmul(m, Matrix.zeros(3, 4))
    assert np.array_equal(out.array, np.zeros((3, 4)))


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    got = matmul(Matrix(a), Matrix(b)).array
    want = naive_matmul(a, b)
    assert np.max(np.abs(got - want)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Matrix.zeros(2, 3), Matrix.zeros(4, 2))


# ---------------------------------------------------------------------------
# row_softmax
# ---------------------------------------------------------------------------

def test_row_softmax_symmetric_row():
    out = row_softmax(Matrix([[0.0, 0.0]]))
    assert np.allclose(out.array, [[0.5, 0.5]], atol=1e-15)


def test_row_softmax_extreme_logits_no_overflow():
    out = row_softmax(Matrix([[1000.0, 0.0]])).array
    assert np.isfinite(out).all()
    assert out[0, 0] > 1.0 - 1e-12
    assert out[0, 1] < 1e-12


def test_row_softmax_matches_scalar_oracle():
    # Direct exp/sum on small logits, no max shift needed at this scale.
    logits = [1.0, 2.0, 3.0]
    den = sum(math.exp(v) for v in logits)
    want = [math.exp(v) / den for v in logits]
    got = row_softmax(Matrix([logits])).array[0]
    assert np.max(np.abs(got - want)) < 1e-12


@settings(max_examples=200)
@given(hnp.arrays(np.float64, (3, 4),
                  elements=st.floats(-50.0, 50.0)))
def test_row_softmax_rows_are_distributions(a):
    out = row_softmax(Matrix(a)).array
    assert (out >= 0.0).all()
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# row_normalize_sqrt_d
# ---------------------------------------------------------------------------

def test_row_normalize_three_four():
    out = row_normalize_sqrt_d(Matrix([[3.0, 4.0]])).array[0]
    want = np.array([3.0 / 5.0, 4.0 / 5.0]) * math.sqrt(2.0)
    assert np.max(np.abs(out - want)) < 1e-15


def test_row_normalize_idempotent_on_normalized_row():
    row = np.array([[1.0, 1.0, 1.0, 1.0]])  # norm 2 = sqrt(4)
    out = row_normalize_sqrt_d(Matrix(row)).array
    assert np.max(np.abs(out - row)) < 1e-15


def test_row_normalize_rejects_zero_row():
    with pytest.raises(DegenerateInputError):
        row_normalize_sqrt_d(Matrix([[1.0, 0.0], [0.0, 0.0]]))


@settings(max_examples=200)
@given(hnp.arrays(np.float64, (2, 5),
                  elements=st.floats(-100.0, 100.0)))
def test_row_normalize_norms_and_direction(a):
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        with pytest.raises(DegenerateInputError):
            row_normalize_sqrt_d(Matrix(a))
        return
    out = row_normalize_sqrt_d(Matrix(a)).array
    assert np.max(np.abs(np.linalg.norm(out, axis=1)
                         - math.sqrt(5.0))) < 1e-12
    for row_in, row_out in zip(a, out):
        assert cosine(row_in, row_out) > 1.0 - 1e-12


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------

def test_cosine_reference_values():
    assert cosine([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert abs(cosine([1.0, 0.0], [0.0, 1.0])) < 1e-15
    assert abs(cosine([1.0, 0.0], [1.0, 1.0]) - 1.0 / math.sqrt(2.0)) < 1e-12
    assert cosine([1.0, 0.0], [-2.0, 0.0]) == -1.0


def test_cosine_rejects_zero_vector():
    with pytest.raises(DegenerateInputError):
        cosine([0.0, 0.0], [1.0, 0.0])


def test_cosine_length_mismatch():
    with pytest.raises(DimensionError):
        cosine([1.0, 0.0], [1.0, 0.0, 0.0])


@settings(max_examples=200)
@given(
    hnp.arrays(np.float64, (4,), elements=st.floats(-10.0, 10.0)),
    hnp.arrays(np.float64, (4,), elements=st.floats(-10.0, 10.0)),
    st.floats(1e-3, 1e3),
    st.floats(1e-3, 1e3),
)
def test_cosine_positive_scale_invariance(u, v, a, b):
    if np.linalg.norm(u) == 0.0 or np.linalg.norm(v) == 0.0:
        return
    base = cosine(u, v)
    scaled = cosine(a * u, b * v)
    assert abs(base - scaled) < 1e-12
    assert -1.0 <= scaled <= 1.0


# ---------------------------------------------------------------------------
# spectral quantities
# ---------------------------------------------------------------------------

def test_spectral_identity_and_diagonal():
    assert abs(spectral_norm(Matrix.identity(4)) - 1.0) < 1e-10
    diag = Matrix([[3.0, 0.0], [0.0, 1.0]])
    assert abs(spectral_norm(diag) - 3.0) < 1e-10
    assert abs(min_singular(diag) - 1.0) < 1e-10
    assert abs(condition_kappa(diag) - 3.0) < 1e-9
    assert abs(condition_kappa(Matrix.identity(4)) - 1.0) < 1e-9


def test_spectral_zero_matrix():
    assert spectral_norm(Matrix.zeros(3, 3)) == 0.0


def test_spectral_known_closed_form():
    # Singular values of [[1,1],[0,1]] are the golden ratio and its inverse.
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    m = Matrix([[1.0, 1.0], [0.0, 1.0]])
    assert abs(spectral_norm(m) - phi) < 1e-10
    assert abs(min_singular(m) - 1.0 / phi) < 1e-10


@pytest.mark.parametrize("seed,shape", [
    (0, (8, 8)), (1, (8, 8)), (2, (8, 8)), (3, (5, 3)), (4, (3, 5)),
])
def test_spectral_matches_jacobi_oracle(seed, shape):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    svals = jacobi_singular_values(a)
    assert abs(spectral_norm(Matrix(a)) - svals[0]) < 1e-8
    if shape[0] >= shape[1]:
        assert abs(min_singular(Matrix(a)) - svals[-1]) < 1e-8


def test_min_singular_rejects_wide_and_rank_deficient():
    with pytest.raises(SingularMatrixError):
        min_singular(Matrix.zeros(2, 3))
    rank1 = np.outer([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    with pytest.raises(SingularMatrixError):
        min_singular(Matrix(rank1))
    with pytest.raises(SingularMatrixError):
        condition_kappa(Matrix(rank1))


def test_spectral_dominates_random_unit_vectors():
    rng = np.random.default_rng(42)
    a = rng.standard_normal((8, 8))
    sigma = spectral_norm(Matrix(a))
    vs = rng.standard_normal((1000, 8))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    stretch = np.linalg.norm(vs @ a.T, axis=1)
    assert stretch.max() <= sigma * (1.0 + 1e-9)


# ---------------------------------------------------------------------------
# row-norm based operator norms
# ---------------------------------------------------------------------------

def test_row_norm_operators_identity():
    assert norm_2_to_inf(Matrix.identity(3)) == 1.0
    assert norm_2_to_1_upper(Matrix.identity(3)) == 3.0


def test_row_norm_operators_single_row():
    m = Matrix([[3.0, 4.0]])
    assert norm_2_to_inf(m) == 5.0
    assert norm_2_to_1_upper(m) == 5.0


def test_row_norm_operators_two_rows():
    m = Matrix([[3.0, 4.0], [0.0, 5.0]])
    assert norm_2_to_inf(m) == 5.0
    assert norm_2_to_1_upper(m) == 10.0


def test_norm_2_to_inf_attained_by_worst_row():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 4))
    norms = np.linalg.norm(a, axis=1)
    worst = a[int(np.argmax(norms))]
    v = worst / np.linalg.norm(worst)
    assert abs(np.max(np.abs(a @ v)) - norm_2_to_inf(Matrix(a))) < 1e-12


def test_norm_2_to_1_upper_dominates_random_unit_vectors():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((6, 4))
    bound = norm_2_to_1_upper(Matrix(a))
    vs = rng.standard_normal((1000, 4))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    l1 = np.abs(vs @ a.T).sum(axis=1)
    assert l1.max() <= bound + 1e-12


def test_frobenius_norm_simple():
    assert abs(frobenius_norm(Matrix([[3.0, 4.0]])) - 5.0) < 1e-15
