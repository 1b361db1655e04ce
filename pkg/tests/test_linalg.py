import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchwiden.errors import ContractError
from branchwiden.linalg import kmeans, kmeans_objective, least_squares_fit, matmul, sym_eig


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])

    def test_annihilation(self):
        np.testing.assert_array_equal(matmul([[1, 0], [0, 0]], [[0], [5]]), [[0], [0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=1e-14, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_associativity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.standard_normal(s) for s in [(3, 4), (4, 5), (5, 2)])
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestLeastSquares:
    def test_square_full_rank(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((4, 4))
        coef, res = least_squares_fit(b, b)
        np.testing.assert_allclose(coef, np.eye(4), atol=1e-10)
        assert res < 1e-10

    def test_orthogonal_remainder(self):
        coef, res = least_squares_fit([[1.0, 1.0]], [[1.0, 0.0]])
        assert coef[0, 0] == pytest.approx(1.0)
        assert res == pytest.approx(1.0)

    def test_matches_projector(self):
        rng = np.random.default_rng(1)
        y, b = rng.standard_normal((6, 5)), rng.standard_normal((2, 5))
        proj = b.T @ np.linalg.inv(b @ b.T) @ b
        expected = np.linalg.norm(y - y @ proj)
        _, res = least_squares_fit(y, b)
        assert res == pytest.approx(expected, rel=1e-12)

    def test_empty_basis(self):
        y = np.array([[3.0, 4.0]])
        coef, res = least_squares_fit(y, np.zeros((0, 2)))
        assert coef.shape == (1, 0)
        assert res == pytest.approx(5.0)

    def test_rank_deficient_rows_dropped(self):
        b = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        y = np.array([[1.0, 1.0, 1.0]])
        coef, res = least_squares_fit(y, b)
        assert res == pytest.approx(1.0)
        np.testing.assert_allclose(coef @ b, [[1.0, 1.0, 0.0]], atol=1e-12)
        assert np.count_nonzero(coef) == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_residual_non_increasing_when_row_added(self, seed):
        rng = np.random.default_rng(seed)
        y, b = rng.standard_normal((5, 6)), rng.standard_normal((4, 6))
        residuals = [least_squares_fit(y, b[:k])[1] for k in range(5)]
        assert all(r1 <= r0 + 1e-12 for r0, r1 in zip(residuals, residuals[1:]))


class TestSymEig:
    def test_diagonal(self):
        vals, _ = sym_eig(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(vals, [1, 2, 3])

    def test_swap(self):
        vals, _ = sym_eig([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(vals, [-1, 1], atol=1e-15)

    def test_reconstruction_and_orthonormality(self):
        rng = np.random.default_rng(2)
        m = rng.standard_normal((6, 6))
        s = m + m.T
        vals, vecs = sym_eig(s)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, s, atol=1e-8)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(6), atol=1e-8)
        for k in range(6):
            assert np.linalg.norm(s @ vecs[:, k] - vals[k] * vecs[:, k]) <= 1e-8 * np.linalg.norm(s)
        assert np.all(np.diff(vals) >= 0)

    def test_trace(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((5, 5))
        s = m @ m.T
        vals, _ = sym_eig(s)
        assert vals.sum() == pytest.approx(np.trace(s), rel=1e-8)

    def test_rejects_non_symmetric(self):
        with pytest.raises(ContractError):
            sym_eig([[0.0, 1.0], [0.0, 0.0]])


def best_two_partition(points):
    n = len(points)
    best = np.inf
    for mask in itertools.product([0, 1], repeat=n):
        if 0 < sum(mask) < n:
            best = min(best, kmeans_objective(points, np.array(mask)))
    return best


class TestKmeans:
    def test_k_equals_n(self):
        np.testing.assert_array_equal(kmeans(np.random.default_rng(0).standard_normal((4, 2)), 4, 0), [0, 1, 2, 3])

    def test_separated_pairs(self):
        labels = kmeans([[0.0], [0.1], [10.0], [10.1]], 2, seed=5)
        assert labels[0] == labels[1] != labels[2] == labels[3]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive_on_five_points(self, seed):
        rng = np.random.default_rng(100 + seed)
        pts = np.concatenate([rng.normal(0, 0.3, (2, 2)), rng.normal(3, 0.3, (3, 2))])
        labels = kmeans(pts, 2, seed)
        assert kmeans_objective(pts, labels) <= best_two_partition(pts) * 1.0 + 1e-12

    def test_deterministic_and_non_empty(self):
        pts = np.random.default_rng(7).standard_normal((30, 3))
        a, b = kmeans(pts, 5, 11), kmeans(pts, 5, 11)
        np.testing.assert_array_equal(a, b)
        assert set(a) == set(range(5))

    def test_objective_non_increasing(self):
        pts = np.random.default_rng(8).standard_normal((60, 2))
        hist = []
        kmeans(pts, 4, 3, history=hist)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_too_many_clusters(self):
        with pytest.raises(ContractError):
            kmeans(np.zeros((2, 1)), 3, 0)
