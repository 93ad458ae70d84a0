"""
Linear-algebra substrate: counted linear operators, preconditioned CG,
factorized sparse solves and the small dense kernels used by the
randomized eigensolvers.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PINV_RTOL = 1e-12


class LinalgError(Exception):
    """Base class for linear-algebra failures."""


class NotPositiveDefiniteError(LinalgError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"Matrix is not positive definite: non-positive pivot at index {index}")


class RankDeficiencyError(LinalgError):
    def __init__(self, column: int, message: str = ""):
        self.column = column
        super().__init__(message or f"Matrix is rank deficient at column {column}")


class AsymmetryError(LinalgError):
    pass


class ConvergenceError(LinalgError):
    pass


class LinearOp:
    """
    Matrix-free linear operator of dimension n.

    Every call to ``apply`` is counted; the counter is guarded by a lock so
    operators can be shared by the threaded block applies. ``pure=False``
    marks an apply that mutates shared state; such operators are never
    applied from worker threads.
    """

    def __init__(
        self,
        n: int,
        apply: Callable[[np.ndarray], np.ndarray],
        apply_transpose: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        symmetric: bool = False,
        name: str = "op",
        pure: bool = True,
    ):
        self.n = int(n)
        self._apply = apply
        self._apply_transpose = apply_transpose
        self.symmetric = symmetric
        self.name = name
        self.pure = pure
        self.applies = 0
        self._lock = threading.Lock()

    def __repr__(self):
        return f"LinearOp(name={self.name!r}, n={self.n}, symmetric={self.symmetric})"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x)

    def apply(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            self.applies += 1
        return np.asarray(self._apply(np.asarray(x, dtype=float)), dtype=float)

    def apply_transpose(self, x: np.ndarray) -> np.ndarray:
        if self.symmetric:
            return self.apply(x)
        if self._apply_transpose is None:
            raise LinalgError(f"Operator {self.name} has no transpose action")
        with self._lock:
            self.applies += 1
        return np.asarray(self._apply_transpose(np.asarray(x, dtype=float)), dtype=float)

    def apply_block(self, X: np.ndarray, threads: int = 1) -> np.ndarray:
        """Apply to every column of X; columns are gathered in order. Impure operators always run serially."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.apply(X)
        columns = [X[:, j] for j in range(X.shape[1])]
        if threads > 1 and len(columns) > 1 and self.pure:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                results = list(executor.map(self.apply, columns))
        else:
            results = [self.apply(c) for c in columns]
        if not results:
            return np.zeros((self.n, 0))
        return np.column_stack(results)

    def reset_count(self):
        with self._lock:
            self.applies = 0

    def to_dense(self) -> np.ndarray:
        return self.apply_block(np.eye(self.n))

    def check_symmetry(self, seed: int = 0, probes: int = 10) -> float:
        """Largest |<Ax,y> - <x,Ay>| / (|Ax| |y|) over random probe pairs."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal(self.n)
            y = rng.standard_normal(self.n)
            ax = self.apply(x)
            ay = self.apply(y)
            scale = np.linalg.norm(ax) * np.linalg.norm(y)
            if scale == 0.0:
                continue
            worst = max(worst, abs(ax @ y - x @ ay) / scale)
        return worst

    @classmethod
    def from_matrix(cls, A, symmetric: Optional[bool] = None, name: str = "matrix") -> "LinearOp":
        if symmetric is None:
            diff = A - A.T
            if sp.issparse(diff):
                diff = diff.toarray()
            symmetric = bool(np.allclose(diff, 0.0, atol=0.0))
        return cls(
            A.shape[0],
            lambda x: A @ x,
            apply_transpose=lambda x: A.T @ x,
            symmetric=symmetric,
            name=name,
        )

    @classmethod
    def identity(cls, n: int, name: str = "identity") -> "LinearOp":
        return cls(n, lambda x: x.copy(), symmetric=True, name=name)


class CGTermination(str, Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    NEGATIVE_CURVATURE = "negative_curvature"


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    reason: CGTermination
    residual_norm: float
    rhs_norm: float
    residuals: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.reason == CGTermination.CONVERGED


def cg_solve(
    op: LinearOp,
    rhs: np.ndarray,
    precond: Optional[LinearOp] = None,
    rtol: float = 1e-10,
    max_iter: Optional[int] = None,
    monitor_curvature: bool = False,
    atol: float = 0.0,
) -> CGResult:
    """
    Preconditioned conjugate gradients for op x = rhs.

    With ``monitor_curvature`` the iteration stops at the first direction of
    non-positive curvature (Steihaug). If that happens before any update the
    preconditioned right-hand side is returned.
    """
    b = np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("Right-hand side contains NaN or infinite entries")
    n = b.shape[0]
    if max_iter is None:
        max_iter = 2 * n
    bnorm = float(np.linalg.norm(b))
    x = np.zeros(n)
    if bnorm == 0.0:
        return CGResult(x, 0, CGTermination.CONVERGED, 0.0, 0.0)

    tol = max(rtol * bnorm, atol)
    r = b.copy()
    z = precond(r) if precond is not None else r.copy()
    p = z.copy()
    rz = r @ z
    residuals = [bnorm]
    iterations = 0
    rnorm = bnorm
    while iterations < max_iter:
        Ap = op(p)
        pAp = p @ Ap
        if monitor_curvature and pAp <= 0.0:
            if iterations == 0:
                x = z.copy()
            logger.debug(f"CG hit negative curvature at iteration {iterations}")
            return CGResult(x, iterations, CGTermination.NEGATIVE_CURVATURE, rnorm, bnorm, residuals)
        if pAp == 0.0:
            raise ConvergenceError(f"CG breakdown at iteration {iterations}: zero curvature")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        iterations += 1
        rnorm = float(np.linalg.norm(r))
        residuals.append(rnorm)
        if rnorm <= tol:
            return CGResult(x, iterations, CGTermination.CONVERGED, rnorm, bnorm, residuals)
        z = precond(r) if precond is not None else r.copy()
        rz_new = r @ z
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
    logger.debug(f"CG reached max_iter={max_iter} with relative residual {rnorm / bnorm:.3e}")
    return CGResult(x, iterations, CGTermination.MAX_ITER, rnorm, bnorm, residuals)


def symmetric_gauss_seidel(A) -> LinearOp:
    """Symmetric Gauss-Seidel sweep (L+D) D^-1 (D+U) applied as a preconditioner."""
    A = sp.csr_matrix(A)
    lower = sp.tril(A, format="csr")
    upper = sp.triu(A, format="csr")
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise NotPositiveDefiniteError(int(np.argmin(diag)))

    def sweep(r):
        y = spla.spsolve_triangular(lower, r, lower=True)
        return spla.spsolve_triangular(upper, diag * y, lower=False)

    return LinearOp(A.shape[0], sweep, symmetric=True, name="sgs")


class SparseSolver:
    """
    Repeated solves with one fixed sparse matrix.

    ``direct`` factors once with sparse LU; ``pcg`` runs CG preconditioned
    by symmetric Gauss-Seidel (SPD matrices only).
    """

    def __init__(self, matrix, method: str = "direct", rtol: float = 1e-12, max_iter: Optional[int] = None):
        self.matrix = sp.csr_matrix(matrix)
        self.n = self.matrix.shape[0]
        self.method = method
        self.rtol = rtol
        self.max_iter = max_iter
        self.solves = 0
        self._lock = threading.Lock()
        if method == "direct":
            self._lu = spla.splu(self.matrix.tocsc())
        elif method == "pcg":
            self._op = LinearOp.from_matrix(self.matrix, symmetric=True, name="sparse")
            self._precond = symmetric_gauss_seidel(self.matrix)
        else:
            raise ValueError(f"Unknown solver method: {method}")

    def _count(self, k: int):
        with self._lock:
            self.solves += k

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        self._count(1 if b.ndim == 1 else b.shape[1])
        if self.method == "direct":
            return self._lu.solve(b)
        if b.ndim == 2:
            return np.column_stack([self._pcg(b[:, j]) for j in range(b.shape[1])])
        return self._pcg(b)

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        self._count(1 if b.ndim == 1 else b.shape[1])
        if self.method == "direct":
            return self._lu.solve(b, trans="T")
        return self._pcg(b)

    def _pcg(self, b):
        result = cg_solve(self._op, b, precond=self._precond, rtol=self.rtol, max_iter=self.max_iter)
        if not result.converged:
            raise ConvergenceError(
                f"PCG did not converge: {result.iterations} iterations, "
                f"relative residual {result.residual_norm / result.rhs_norm:.3e}"
            )
        return result.x

    def as_op(self, name: str = "solve") -> LinearOp:
        return LinearOp(self.n, self.solve, apply_transpose=self.solve_transpose, name=name)


def dense_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; a failing pivot is reported by index."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return np.zeros((0, 0))
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise LinalgError(f"dpotrf: illegal value in argument {-info}")
    return L


def dense_qr(Y: np.ndarray, check_rank: bool = True):
    """
    Reduced QR with diag(R) >= 0.

    A column whose diagonal of R falls below max(r, c) * eps * max|R_ii| is
    reported as rank deficient when ``check_rank`` is set.
    """
    Y = np.asarray(Y, dtype=float)
    rows, cols = Y.shape
    if rows < cols:
        raise LinalgError(f"dense_qr needs rows >= columns, got {rows}x{cols}")
    Q, R = np.linalg.qr(Y, mode="reduced")
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    Q = Q * signs
    R = R * signs[:, None]
    if check_rank and cols:
        diag = np.abs(np.diag(R))
        cutoff = max(rows, cols) * np.finfo(float).eps * diag.max()
        bad = np.flatnonzero(diag <= cutoff)
        if bad.size:
            raise RankDeficiencyError(int(bad[0]))
    return Q, R


def symmetrize(T: np.ndarray, tol: float = SYMMETRY_TOL) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    scale = max(np.linalg.norm(T), 1e-300)
    asym = np.linalg.norm(T - T.T) / scale
    if asym > tol:
        raise AsymmetryError(f"Matrix asymmetry {asym:.3e} exceeds tolerance {tol:.1e}")
    return 0.5 * (T + T.T)


def dense_eigh(T: np.ndarray):
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order."""
    T = symmetrize(T)
    values, vectors = sla.eigh(T)
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


@dataclass
class LeastSquaresResult:
    X: np.ndarray
    rank: int
    rank_deficient: bool


def symmetric_ls_solve(G: np.ndarray, F: np.ndarray) -> LeastSquaresResult:
    """Symmetrized minimizer of ||X G - F||: X0 = F pinv(G), X = (X0 + X0^T) / 2."""
    G = np.asarray(G, dtype=float)
    F = np.asarray(F, dtype=float)
    if G.shape != F.shape or G.shape[0] != G.shape[1]:
        raise LinalgError(f"symmetric_ls_solve needs square G, F of equal size, got {G.shape} and {F.shape}")
    G_pinv, rank = sla.pinv(G, atol=0.0, rtol=PINV_RTOL, return_rank=True)
    X0 = F @ G_pinv
    deficient = rank < G.shape[0]
    if deficient:
        logger.warning(f"Least-squares system is rank deficient: rank {rank} of {G.shape[0]}")
    return LeastSquaresResult(0.5 * (X0 + X0.T), int(rank), deficient)
