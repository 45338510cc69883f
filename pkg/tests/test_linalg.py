import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svrehearsal.errors import InvalidInput, ShapeError
from svrehearsal.linalg import ThinSvd, frobenius_norm, matmul, svd


def random_matrix(seed, m, n, scale=1.0):
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    return scale * rng.standard_normal((m, n))


def naive_matmul(a, b):
    m, n, k = a.shape[0], b.shape[1], a.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i][j] = out[i][j] + a[i, p] * b[p, j]
    return np.array(out)


def check_svd_contract(a, t: ThinSvd):
    k = min(a.shape)
    assert t.s.shape == (k,)
    assert np.all(t.s >= 0)
    assert np.all(np.diff(t.s) <= 0)
    assert np.max(np.abs(t.u.T @ t.u - np.eye(k))) <= 1e-8
    assert np.max(np.abs(t.v.T @ t.v - np.eye(k))) <= 1e-8
    err = frobenius_norm(t.reconstruct() - a)
    assert err <= 1e-6 * max(1.0, frobenius_norm(a))


class TestSvd:
    def test_identity(self):
        t = svd(np.eye(3))
        assert np.allclose(t.s, np.ones(3), atol=1e-12)
        assert np.allclose(t.u @ t.v.T, np.eye(3), atol=1e-10)

    def test_rank_one_outer_product(self):
        rng = np.random.Generator(np.random.Philox(key=[5, 0]))
        u0 = rng.standard_normal(4)
        u0 *= 2.0 / np.linalg.norm(u0)
        v0 = rng.standard_normal(3)
        v0 *= 3.0 / np.linalg.norm(v0)
        t = svd(np.outer(u0, v0))
        assert t.s[0] == pytest.approx(6.0, abs=1e-10)
        assert np.all(t.s[1:] <= 1e-10)
        check_svd_contract(np.outer(u0, v0), t)

    def test_matches_gram_eigenvalue_oracle(self):
        # Independent route: singular values are the square roots of the
        # eigenvalues of a.T @ a from a symmetric eigensolver.
        a = random_matrix(17, 5, 3)
        t = svd(a)
        eig = np.linalg.eigvalsh(a.T @ a)
        oracle = np.sqrt(np.clip(eig, 0.0, None))[::-1]
        assert np.max(np.abs(t.s - oracle)) <= 1e-8

    def test_zero_matrix(self):
        t = svd(np.zeros((4, 3)))
        assert np.all(t.s == 0.0)
        assert np.array_equal(t.u, np.eye(4, 3))
        assert np.array_equal(t.v, np.eye(3, 3))

    def test_rank_deficient(self):
        a = random_matrix(9, 6, 2) @ random_matrix(10, 2, 5)
        t = svd(a)
        check_svd_contract(a, t)
        assert np.sum(t.s > 1e-9) == 2

    def test_wide_matrix(self):
        a = random_matrix(3, 3, 7)
        check_svd_contract(a, svd(a))

    def test_single_column(self):
        a = np.array([[3.0], [4.0]])
        t = svd(a)
        assert t.s[0] == pytest.approx(5.0, abs=1e-12)
        check_svd_contract(a, t)

    def test_deterministic(self):
        a = random_matrix(2, 8, 6)
        t1, t2 = svd(a), svd(a)
        assert np.array_equal(t1.u, t2.u)
        assert np.array_equal(t1.s, t2.s)
        assert np.array_equal(t1.v, t2.v)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInput):
            svd(np.array([[1.0, np.nan], [0.0, 1.0]]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12))
    def test_reconstruction_property(self, seed, m, n):
        a = random_matrix(seed, m, n)
        check_svd_contract(a, svd(a))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_transpose_has_same_singular_values(self, seed):
        a = random_matrix(seed, 7, 4)
        assert np.max(np.abs(svd(a).s - svd(a.T).s)) <= 1e-10

    @pytest.mark.parametrize("c", [-2.0, 0.5, 10.0])
    def test_scale_equivariance(self, c):
        a = random_matrix(23, 6, 5)
        assert np.max(np.abs(svd(c * a).s - abs(c) * svd(a).s)) <= 1e-8


class TestMatmul:
    def test_identity(self):
        a = random_matrix(1, 4, 4)
        assert np.array_equal(matmul(a, np.eye(4)), a)

    def test_scalar_case(self):
        assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    def test_matches_naive_triple_loop_exactly(self):
        a = random_matrix(6, 3, 4)
        b = random_matrix(7, 4, 2)
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestFrobeniusNorm:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 5))) == 0.0

    def test_identity(self):
        assert frobenius_norm(np.eye(7)) == pytest.approx(np.sqrt(7), abs=1e-12)

    def test_matches_elementwise_sum(self):
        a = random_matrix(11, 4, 4)
        acc = 0.0
        for x in a.flat:
            acc += x * x
        assert frobenius_norm(a) == pytest.approx(np.sqrt(acc), rel=1e-12)
