"""Matrix primitives and the canonicalized SVD front end."""

import numpy as np
import pytest

from svdgrad import linalg
from oracles import jacobi_svd, matmul_triple_loop

DTYPES = [np.float32, np.float64, np.complex64, np.complex128]


def _random(rng, shape, dtype):
    a = rng.standard_normal(shape)
    if np.issubdtype(np.dtype(dtype), np.complexfloating):
        a = a + 1j * rng.standard_normal(shape)
    return a.astype(dtype)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(42)
    for _ in range(20):
        m, k, n = rng.integers(1, 9, size=3)
        A = _random(rng, (m, k), np.float64)
        B = _random(rng, (k, n), np.float64)
        C = linalg.matmul(A, B)
        ref = matmul_triple_loop(A, B)
        assert np.max(np.abs(C - ref)) <= 1e-13 * max(1.0, np.max(np.abs(ref)))


def test_matmul_identity_and_zero():
    rng = np.random.default_rng(1)
    A = _random(rng, (3, 5), np.float64)
    assert np.array_equal(linalg.matmul(np.eye(3), A), A)
    Z = np.zeros((5, 2))
    assert np.array_equal(linalg.matmul(A, Z), np.zeros((3, 2)))


def test_matmul_shape_and_precision_errors():
    A = np.zeros((2, 3))
    with pytest.raises(ValueError):
        linalg.matmul(A, np.zeros((2, 2)))
    with pytest.raises(TypeError):
        linalg.matmul(A.astype(np.float32), np.zeros((3, 2), dtype=np.float64))
    with pytest.raises(TypeError):
        linalg.matmul(A.astype(int), np.zeros((3, 2)))


def test_conj_transpose_involution_and_norm():
    rng = np.random.default_rng(2)
    A = _random(rng, (6, 4), np.complex128)
    Ah = linalg.conj_transpose(A)
    assert Ah.shape == (4, 6)
    assert np.array_equal(linalg.conj_transpose(Ah), A)
    assert linalg.frobenius(Ah) == pytest.approx(linalg.frobenius(A), rel=0, abs=0)


def test_hadamard_ones_zeros():
    rng = np.random.default_rng(3)
    A = _random(rng, (4, 7), np.float64)
    assert np.array_equal(linalg.hadamard(A, np.ones_like(A)), A)
    assert np.array_equal(linalg.hadamard(A, np.zeros_like(A)), np.zeros_like(A))


def test_frobenius_matches_direct_sum():
    rng = np.random.default_rng(4)
    for dtype in DTYPES:
        A = _random(rng, (5, 3), dtype)
        direct = float(np.sqrt(np.sum(np.abs(A.astype(np.complex128)) ** 2)))
        assert linalg.frobenius(A) == pytest.approx(direct, rel=1e-6)


def test_add_sub_scale():
    rng = np.random.default_rng(5)
    A = _random(rng, (3, 3), np.complex128)
    B = _random(rng, (3, 3), np.complex128)
    assert np.array_equal(linalg.add(A, B), A + B)
    assert np.array_equal(linalg.sub(A, B), A - B)
    assert np.allclose(linalg.scale(2.5, A), 2.5 * A, rtol=0, atol=0)
    with pytest.raises(ValueError):
        linalg.add(A, B[:2, :])


def test_svd_identity():
    f = linalg.svd(np.eye(3))
    assert np.array_equal(f.U, np.eye(3))
    assert np.array_equal(f.s, np.ones(3))
    assert np.array_equal(f.V, np.eye(3))


def test_svd_diagonal():
    f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
    assert np.array_equal(f.s, [3.0, 2.0, 1.0])
    assert np.allclose(f.reconstruct(), np.diag([3.0, 2.0, 1.0]), atol=1e-15)


def test_svd_reconstruction_and_jacobi_oracle():
    rng = np.random.default_rng(6)
    A = _random(rng, (10, 10), np.float64)
    f = linalg.svd(A)
    rel = np.linalg.norm(f.reconstruct() - A) / np.linalg.norm(A)
    assert rel <= 1e-12
    # independent route: one-sided Jacobi, no shared code with the library
    _, s_ref, _ = jacobi_svd(A)
    assert np.max(np.abs(f.s - s_ref)) <= 1e-10 * s_ref[0]


def test_svd_orthonormality_all_dtypes():
    rng = np.random.default_rng(7)
    for dtype in DTYPES:
        single = np.dtype(dtype) in (np.dtype(np.float32), np.dtype(np.complex64))
        tol = 1e-5 if single else 1e-12
        for shape in [(6, 6), (8, 3), (3, 8)]:
            A = _random(rng, shape, dtype)
            f = linalg.svd(A)
            k = min(shape)
            assert f.U.shape == (shape[0], k) and f.V.shape == (shape[1], k)
            assert np.linalg.norm(f.U.conj().T @ f.U - np.eye(k)) <= tol
            assert np.linalg.norm(f.V.conj().T @ f.V - np.eye(k)) <= tol
            rel = np.linalg.norm(f.reconstruct() - A) / np.linalg.norm(A)
            assert rel <= tol
            assert np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0)


def test_svd_singular_values_permutation_invariant():
    rng = np.random.default_rng(8)
    A = _random(rng, (7, 5), np.float64)
    s_ref = np.sort(linalg.svd(A).s)
    for _ in range(5):
        P = np.eye(7)[rng.permutation(7)]
        Q = np.eye(5)[rng.permutation(5)]
        s = np.sort(linalg.svd(P @ A @ Q).s)
        assert np.max(np.abs(s - s_ref)) <= 1e-10 * max(s_ref[-1], 1.0)


def test_svd_sign_convention_and_determinism():
    rng = np.random.default_rng(9)
    for dtype in [np.float64, np.complex128]:
        A = _random(rng, (6, 6), dtype)
        f1 = linalg.svd(A)
        f2 = linalg.svd(A.copy())
        assert np.array_equal(f1.U, f2.U)
        assert np.array_equal(f1.s, f2.s)
        assert np.array_equal(f1.V, f2.V)
        for j in range(6):
            col = f1.U[:, j]
            lead = col[np.nonzero(col)[0][0]]
            assert np.imag(lead) == 0
            assert np.real(lead) > 0


def test_svd_vector_shapes():
    rng = np.random.default_rng(10)
    row = _random(rng, (1, 5), np.float64)
    f = linalg.svd(row)
    assert f.s.shape == (1,)
    assert np.allclose(f.reconstruct(), row, atol=1e-14)
    col = _random(rng, (5, 1), np.complex128)
    f = linalg.svd(col)
    assert f.s.shape == (1,)
    assert np.allclose(f.reconstruct(), col, atol=1e-14)


def test_degenerate_inputs_rejected():
    with pytest.raises(ValueError):
        linalg.svd(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        linalg.svd(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        linalg.svd(np.array([[np.inf, 0.0], [0.0, 1.0]]))
