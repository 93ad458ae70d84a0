import threading
import time

import numpy as np
import pytest
import scipy.sparse as sp

from numerics.linalg import (
    AsymmetryError,
    CGTermination,
    LinalgError,
    LinearOp,
    NotPositiveDefiniteError,
    RankDeficiencyError,
    SparseSolver,
    cg_solve,
    dense_cholesky,
    dense_eigh,
    dense_qr,
    symmetric_ls_solve,
    symmetrize,
)


def laplacian_1d(n):
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n) + 0.1, -np.ones(n - 1)], [-1, 0, 1], format="csr")


class TestLinearOp:
    def test_counts_applies(self, spd_matrix):
        op = LinearOp.from_matrix(spd_matrix(6))
        op(np.ones(6))
        op.apply_block(np.eye(6)[:, :4])
        assert op.applies == 5
        op.reset_count()
        assert op.applies == 0

    def test_threaded_block_matches_serial(self, spd_matrix, rng):
        A = spd_matrix(20, seed=1)
        X = rng.standard_normal((20, 7))
        serial = LinearOp.from_matrix(A).apply_block(X, threads=1)
        threaded = LinearOp.from_matrix(A).apply_block(X, threads=4)
        np.testing.assert_array_equal(serial, threaded)
        np.testing.assert_allclose(serial, A @ X, atol=1e-10)

    @pytest.mark.parametrize("pure, serial_only", [(False, True), (True, False)])
    def test_impure_operator_stays_on_calling_thread(self, pure, serial_only):
        seen = set()

        def record(x):
            seen.add(threading.get_ident())
            time.sleep(0.01)
            return 2.0 * x

        out = LinearOp(5, record, pure=pure).apply_block(np.eye(5), threads=4)
        np.testing.assert_array_equal(out, 2.0 * np.eye(5))
        assert (seen == {threading.get_ident()}) == serial_only

    def test_symmetry_check(self, spd_matrix, rng):
        assert LinearOp.from_matrix(spd_matrix(10)).check_symmetry() < 1e-13
        assert LinearOp.from_matrix(rng.standard_normal((10, 10))).check_symmetry() > 1e-3

    def test_missing_transpose(self):
        op = LinearOp(3, lambda x: 2 * x)
        with pytest.raises(LinalgError):
            op.apply_transpose(np.ones(3))


class TestCG:
    def test_matches_dense_solve(self, spd_matrix, rng):
        A = spd_matrix(5, seed=2)
        b = rng.standard_normal(5)
        result = cg_solve(LinearOp.from_matrix(A), b, rtol=1e-14)
        expected = np.linalg.solve(A, b)
        assert result.converged
        assert np.linalg.norm(result.x - expected) / np.linalg.norm(expected) < 1e-8

    def test_zero_rhs(self, spd_matrix):
        result = cg_solve(LinearOp.from_matrix(spd_matrix(4)), np.zeros(4))
        assert result.iterations == 0
        assert result.reason == CGTermination.CONVERGED
        np.testing.assert_array_equal(result.x, 0.0)

    def test_preconditioner_cuts_iterations(self):
        n = 200
        A = (laplacian_1d(n) + sp.diags(np.linspace(1.0, 1000.0, n))).tocsr()
        b = np.ones(n)
        plain = cg_solve(LinearOp.from_matrix(A, symmetric=True), b, rtol=1e-10)
        jacobi = LinearOp(n, lambda r: r / A.diagonal(), symmetric=True)
        preconditioned = cg_solve(LinearOp.from_matrix(A, symmetric=True), b, precond=jacobi, rtol=1e-10)
        assert preconditioned.converged
        assert preconditioned.iterations < plain.iterations

    def test_negative_curvature_before_first_update(self):
        op = LinearOp.from_matrix(np.diag([1.0, -1.0]))
        result = cg_solve(op, np.array([1.0, 1.0]), monitor_curvature=True)
        assert result.reason == CGTermination.NEGATIVE_CURVATURE
        assert result.iterations == 0
        np.testing.assert_array_equal(result.x, [1.0, 1.0])

    def test_max_iter(self, spd_matrix, rng):
        result = cg_solve(LinearOp.from_matrix(spd_matrix(30, shift=0.01)), rng.standard_normal(30), rtol=1e-14, max_iter=2)
        assert result.reason == CGTermination.MAX_ITER
        assert result.iterations == 2
        assert len(result.residuals) == 3

    def test_rejects_non_finite_rhs(self, spd_matrix):
        with pytest.raises(ValueError):
            cg_solve(LinearOp.from_matrix(spd_matrix(3)), np.array([1.0, np.nan, 0.0]))


class TestSparseSolver:
    @pytest.mark.parametrize("method", ["direct", "pcg"])
    def test_solve(self, method, rng):
        A = laplacian_1d(50)
        b = rng.standard_normal(50)
        solver = SparseSolver(A, method=method, rtol=1e-13)
        x = solver.solve(b)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10
        assert solver.solves == 1

    def test_transpose_solve(self, rng):
        A = laplacian_1d(30) + sp.diags([0.3 * np.ones(29)], [1])
        b = rng.standard_normal(30)
        solver = SparseSolver(A)
        np.testing.assert_allclose(A.T @ solver.solve_transpose(b), b, atol=1e-11)

    def test_block_solve_counts_columns(self, rng):
        solver = SparseSolver(laplacian_1d(10))
        solver.solve(rng.standard_normal((10, 3)))
        assert solver.solves == 3

    def test_pcg_needs_positive_diagonal(self):
        with pytest.raises(NotPositiveDefiniteError):
            SparseSolver(sp.diags([1.0, -2.0, 3.0]), method="pcg")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            SparseSolver(laplacian_1d(4), method="qr")


class TestDenseKernels:
    def test_cholesky(self, spd_matrix):
        A = spd_matrix(8, seed=3)
        L = dense_cholesky(A)
        np.testing.assert_allclose(L @ L.T, A, rtol=1e-12)
        assert np.allclose(L, np.tril(L))

    def test_cholesky_reports_pivot(self):
        with pytest.raises(NotPositiveDefiniteError) as err:
            dense_cholesky(np.diag([1.0, -1.0, 2.0]))
        assert err.value.index == 1

    def test_qr_identity(self):
        Q, R = dense_qr(np.eye(4))
        np.testing.assert_allclose(Q, np.eye(4))
        np.testing.assert_allclose(R, np.eye(4))

    def test_qr_scaled_columns(self):
        Y = np.vstack([np.diag([2.0, 3.0, 4.0]), np.zeros((2, 3))])
        Q, R = dense_qr(Y)
        np.testing.assert_allclose(Q, np.eye(5)[:, :3], atol=1e-15)
        np.testing.assert_allclose(R, np.diag([2.0, 3.0, 4.0]), atol=1e-15)

    def test_qr_recomposition(self, rng):
        Y = rng.standard_normal((10, 4))
        Q, R = dense_qr(Y)
        assert np.linalg.norm(Q @ R - Y) < 1e-12
        assert np.all(np.diag(R) >= 0.0)
        np.testing.assert_allclose(Q.T @ Q, np.eye(4), atol=1e-14)

    def test_qr_rank_deficiency(self, rng):
        Y = rng.standard_normal((8, 3))
        Y[:, 2] = Y[:, 0]
        with pytest.raises(RankDeficiencyError) as err:
            dense_qr(Y)
        assert err.value.column == 2

    def test_eigh_descending(self):
        values, vectors = dense_eigh(np.diag([3.0, 1.0, 2.0]))
        np.testing.assert_allclose(values, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(np.abs(vectors), np.eye(3)[:, [0, 2, 1]])

    def test_eigh_matches_reference(self, rng):
        X = rng.standard_normal((12, 12))
        T = X + X.T
        values, vectors = dense_eigh(T)
        np.testing.assert_allclose(values, np.sort(np.linalg.eigvalsh(T))[::-1], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(T @ vectors, vectors * values, atol=1e-10)

    def test_symmetrize_rejects_asymmetric(self):
        with pytest.raises(AsymmetryError):
            symmetrize(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_ls_identity(self, rng):
        F = rng.standard_normal((5, 5))
        result = symmetric_ls_solve(np.eye(5), F)
        np.testing.assert_allclose(result.X, 0.5 * (F + F.T))
        assert not result.rank_deficient

    def test_ls_plant_and_recover(self, rng):
        X = rng.standard_normal((6, 6))
        S = X + X.T
        G = rng.standard_normal((6, 6)) + 6.0 * np.eye(6)
        result = symmetric_ls_solve(G, S @ G)
        assert np.linalg.norm(result.X - S) / np.linalg.norm(S) < 1e-8

    def test_ls_rank_deficient(self, rng):
        G = np.zeros((4, 4))
        G[:2, :2] = np.eye(2)
        result = symmetric_ls_solve(G, rng.standard_normal((4, 4)))
        assert result.rank == 2
        assert result.rank_deficient
