"""
Randomized solvers for the generalized symmetric eigenproblem A v = lambda B v.

A is only available through its action; B through both an apply and a
solve. The sketch Omega is Gaussian and drawn column by column from
counter-based streams, so enlarging the oversampling keeps the leading
columns unchanged.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from pydantic import BaseModel, Field

from numerics.linalg import (
    LinalgError,
    LinearOp,
    NotPositiveDefiniteError,
    RankDeficiencyError,
    dense_cholesky,
    dense_eigh,
    dense_qr,
    symmetric_ls_solve,
)

logger = logging.getLogger(__name__)


class GHEPConfig(BaseModel):
    """Settings for one randomized eigensolve."""

    r: int = Field(default=50, ge=1, description="Number of eigenpairs returned")
    l: int = Field(default=20, ge=0, description="Oversampling columns")
    seed: int = Field(default=0, ge=0, description="Seed of the Gaussian sketch")
    threads: int = Field(default=1, ge=1, description="Worker threads for column applies")

    def sketch_size(self, n: int) -> int:
        k = self.r + self.l
        if k > n:
            raise LinalgError(f"r + l = {k} exceeds the problem dimension {n}")
        return k


@dataclass
class GHEPResult:
    eigenvalues: np.ndarray
    vectors: np.ndarray
    method: str
    counters: dict = field(default_factory=dict)
    omega: Optional[np.ndarray] = None
    sketch: Optional[np.ndarray] = None

    @property
    def rank(self) -> int:
        return self.eigenvalues.size


def gaussian_test_matrix(n: int, k: int, seed: int, start: int = 0) -> np.ndarray:
    """Standard normal n x k block; column j comes from its own Philox stream."""
    columns = [np.random.Generator(np.random.Philox(key=(int(seed) << 64) + j)).standard_normal(n) for j in range(start, start + k)]
    return np.column_stack(columns) if columns else np.zeros((n, 0))


def pre_chol_qr(Y: np.ndarray, B: LinearOp, threads: int = 1):
    """
    B-orthonormalize the columns of Y.

    Returns (Q, Qbar, R) with Q^T B Q = I, Qbar = B Q and Q R = Y.
    """
    Z, R_Y = dense_qr(Y, check_rank=False)
    Zbar = B.apply_block(Z, threads)
    gram = Z.T @ Zbar
    try:
        L = dense_cholesky(0.5 * (gram + gram.T))
    except NotPositiveDefiniteError as e:
        raise RankDeficiencyError(e.index, f"Sketch is rank deficient in the B inner product at column {e.index}") from e
    R_Z = L.T
    Q = sla.solve_triangular(R_Z, Z.T, trans="T", lower=False).T
    Qbar = sla.solve_triangular(R_Z, Zbar.T, trans="T", lower=False).T
    return Q, Qbar, R_Z @ R_Y


def _snapshot(*ops):
    return [op.applies for op in ops]


def _counters(before, A, B_apply, B_solve):
    after = _snapshot(A, B_apply, B_solve)
    return {"A_applies": after[0] - before[0], "B_applies": after[1] - before[1], "B_solves": after[2] - before[2]}


def _finish(T, Q, cfg, method, counters, omega=None, sketch=None) -> GHEPResult:
    asym = np.linalg.norm(T - T.T) / max(np.linalg.norm(T), 1e-300)
    if asym > 1e-8:
        logger.warning(f"{method}: projected matrix asymmetry {asym:.2e}")
    values, S = dense_eigh(0.5 * (T + T.T))
    V = Q @ S[:, : cfg.r]
    logger.debug(f"{method}: lambda_1={values[0]:.4e}, lambda_r={values[cfg.r - 1]:.4e}, counters={counters}")
    return GHEPResult(values[: cfg.r].copy(), V, method, counters, omega, sketch)


def _sketch(A, B_solve, cfg, Omega):
    k = cfg.sketch_size(A.n)
    if Omega is None:
        Omega = gaussian_test_matrix(A.n, k, cfg.seed)
    elif Omega.shape != (A.n, k):
        raise LinalgError(f"Omega must be {A.n}x{k}, got {Omega.shape}")
    Ybar = A.apply_block(Omega, cfg.threads)
    Y = B_solve.apply_block(Ybar, cfg.threads)
    return Omega, Ybar, Y


def double_pass(A: LinearOp, B_apply: LinearOp, B_solve: LinearOp, cfg: GHEPConfig, Omega: Optional[np.ndarray] = None) -> GHEPResult:
    before = _snapshot(A, B_apply, B_solve)
    Omega, _, Y = _sketch(A, B_solve, cfg, Omega)
    Q, _, _ = pre_chol_qr(Y, B_apply, cfg.threads)
    T = Q.T @ A.apply_block(Q, cfg.threads)
    return _finish(T, Q, cfg, "double_pass", _counters(before, A, B_apply, B_solve), Omega)


def single_pass(A: LinearOp, B_apply: LinearOp, B_solve: LinearOp, cfg: GHEPConfig, Omega: Optional[np.ndarray] = None) -> GHEPResult:
    """T from the symmetrized least-squares fit T (Qbar^T Omega) = Qbar^T Y."""
    before = _snapshot(A, B_apply, B_solve)
    Omega, _, Y = _sketch(A, B_solve, cfg, Omega)
    Q, Qbar, _ = pre_chol_qr(Y, B_apply, cfg.threads)
    fit = symmetric_ls_solve(Qbar.T @ Omega, Qbar.T @ Y)
    return _finish(fit.X, Q, cfg, "single_pass", _counters(before, A, B_apply, B_solve), Omega, Y)


def single_pass_saibaba(A: LinearOp, B_apply: LinearOp, B_solve: LinearOp, cfg: GHEPConfig, Omega: Optional[np.ndarray] = None) -> GHEPResult:
    """T = G^-T (Omega^T A Omega) G^-1 with G = Qbar^T Omega."""
    before = _snapshot(A, B_apply, B_solve)
    Omega, Ybar, Y = _sketch(A, B_solve, cfg, Omega)
    Q, Qbar, _ = pre_chol_qr(Y, B_apply, cfg.threads)
    G = Qbar.T @ Omega
    X = sla.solve(G.T, Omega.T @ Ybar)
    T = sla.solve(G.T, X.T).T
    return _finish(T, Q, cfg, "single_pass_saibaba", _counters(before, A, B_apply, B_solve), Omega, Y)


SOLVERS = {"double": double_pass, "single": single_pass, "saibaba": single_pass_saibaba}


def solve_dense_ghep(A: np.ndarray, B: np.ndarray):
    """Dense reference: all eigenpairs via Cholesky reduction of B, descending."""
    values, vectors = sla.eigh(0.5 * (A + A.T), 0.5 * (B + B.T))
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order]


def eigen_residuals(A: LinearOp, B: LinearOp, result: GHEPResult, count: Optional[int] = None) -> np.ndarray:
    """||A v - lambda B v|| / (|lambda| ||B v||) for the leading pairs."""
    count = result.rank if count is None else min(count, result.rank)
    out = np.empty(count)
    for i in range(count):
        v = result.vectors[:, i]
        Bv = B(v)
        scale = abs(result.eigenvalues[i]) * np.linalg.norm(Bv)
        out[i] = np.linalg.norm(A(v) - result.eigenvalues[i] * Bv) / max(scale, 1e-300)
    return out
