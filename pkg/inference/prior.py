"""
BiLaplacian Gaussian prior N(m_pr, A^-2) with A = -gamma div(Theta grad) + delta I
and a Robin boundary term.

The precision is applied as R = K M^-1 K and the covariance as
R^-1 = K^-1 M K^-1, where K is the assembled elliptic form and M the mass
matrix. Samples solve K x = C_M eta with C_M the rectangular factor of M.
"""

import logging
from typing import Optional, Union

import numpy as np

from numerics import fem
from numerics.linalg import LinearOp, SparseSolver
from numerics.randeig import GHEPConfig, double_pass

logger = logging.getLogger(__name__)

DEFAULT_ROBIN_CONSTANT = 1.42

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def rademacher(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, count)) * 2.0 - 1.0


def estimate_diagonal_stochastic(op: LinearOp, num_probes: int, seed: SeedLike = 0) -> np.ndarray:
    """Diagonal of op from Rademacher probes: sum(z * op z) / sum(z * z)."""
    if num_probes < 1:
        raise ValueError(f"num_probes must be >= 1, got {num_probes}")
    Z = rademacher(_rng(seed), op.n, num_probes)
    W = op.apply_block(Z)
    return (Z * W).sum(axis=1) / (Z * Z).sum(axis=1)


def estimate_diagonal_randomized(op: LinearOp, rank: int, seed: int = 0, threads: int = 1) -> np.ndarray:
    """Diagonal of a symmetric op from its leading eigenpairs: sum mu_i v_i^2."""
    identity = LinearOp.identity(op.n)
    result = double_pass(op, identity, identity, GHEPConfig(r=rank, l=0, seed=seed, threads=threads))
    return (result.vectors**2) @ result.eigenvalues


class BiLaplacianPrior:
    """Gaussian prior whose covariance is the squared inverse of an elliptic operator."""

    def __init__(
        self,
        space: fem.FnSpace,
        gamma: float,
        delta: float,
        Theta=None,
        robin_beta: Optional[float] = None,
        robin_constant: float = DEFAULT_ROBIN_CONSTANT,
        mean: Optional[np.ndarray] = None,
        solver: str = "direct",
    ):
        if gamma <= 0.0 or delta <= 0.0:
            raise ValueError(f"Prior needs gamma > 0 and delta > 0, got gamma={gamma}, delta={delta}")
        self.space = space
        self.gamma = float(gamma)
        self.delta = float(delta)
        self.Theta = np.eye(2) if Theta is None else np.asarray(Theta, dtype=float)
        self.robin_beta = np.sqrt(gamma * delta) / robin_constant if robin_beta is None else float(robin_beta)
        self.mean = np.zeros(space.n) if mean is None else np.asarray(mean, dtype=float).copy()
        if self.mean.shape != (space.n,):
            raise ValueError(f"Prior mean has shape {self.mean.shape}, expected ({space.n},)")

        self.K = fem.assemble_elliptic(space, self.gamma, self.Theta, self.delta, self.robin_beta)
        self.M = fem.assemble_mass(space)
        self.C_M = fem.rect_factor(space, "mass")
        self.K_solver = SparseSolver(self.K, method=solver, rtol=1e-12)
        self.M_solver = SparseSolver(self.M, method=solver, rtol=1e-12)
        self.R_op = LinearOp(space.n, self.apply_R, symmetric=True, name="prior_precision")
        self.Rinv_op = LinearOp(space.n, self.apply_Rinv, symmetric=True, name="prior_covariance")
        logger.debug(f"BiLaplacian prior on {space}: gamma={self.gamma}, delta={self.delta}, beta={self.robin_beta:.4g}")

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def noise_dim(self) -> int:
        return self.C_M.q_tot

    def apply_R(self, x: np.ndarray) -> np.ndarray:
        return self.K @ self.M_solver.solve(self.K @ x)

    def apply_Rinv(self, x: np.ndarray) -> np.ndarray:
        return self.K_solver.solve(self.M @ self.K_solver.solve(x))

    def cost(self, m: np.ndarray) -> float:
        d = np.asarray(m) - self.mean
        return 0.5 * float(d @ self.apply_R(d))

    def grad(self, m: np.ndarray) -> np.ndarray:
        return self.apply_R(np.asarray(m) - self.mean)

    def cost_grad(self, m: np.ndarray):
        d = np.asarray(m) - self.mean
        Rd = self.apply_R(d)
        return 0.5 * float(d @ Rd), Rd

    def sample_from_noise(self, eta: np.ndarray, add_mean: bool = True) -> np.ndarray:
        x = self.K_solver.solve(self.C_M.C @ eta)
        return x + self.mean if add_mean else x

    def sample(self, seed: SeedLike, add_mean: bool = True) -> np.ndarray:
        eta = _rng(seed).standard_normal(self.noise_dim)
        return self.sample_from_noise(eta, add_mean)

    def sample_batch(self, seed: SeedLike, count: int, add_mean: bool = True) -> np.ndarray:
        """count samples as columns, from one stream."""
        eta = _rng(seed).standard_normal((self.noise_dim, count))
        X = self.K_solver.solve(self.C_M.C @ eta)
        return X + self.mean[:, None] if add_mean else X

    def pointwise_variance_stochastic(self, num_probes: int, seed: SeedLike = 0) -> np.ndarray:
        return estimate_diagonal_stochastic(self.Rinv_op, num_probes, seed)

    def pointwise_variance_randomized(self, rank: int, seed: int = 0, threads: int = 1) -> np.ndarray:
        return estimate_diagonal_randomized(self.Rinv_op, rank, seed, threads)

    def pointwise_variance_exact(self) -> np.ndarray:
        """diag(R^-1) from n solves; reference only."""
        return np.diag(self.Rinv_op.to_dense()).copy()

    def pointwise_variance(self, method: str = "randomized", rank: int = 100, num_probes: int = 100, seed: int = 0, threads: int = 1) -> np.ndarray:
        if method == "exact":
            return self.pointwise_variance_exact()
        if method == "stochastic":
            return self.pointwise_variance_stochastic(num_probes, seed)
        if method == "randomized":
            return self.pointwise_variance_randomized(min(rank, self.n), seed, threads)
        raise ValueError(f"Unknown variance method {method!r}")

    def trace(self, method: str = "exact", num_probes: int = 100, seed: int = 0) -> float:
        """Trace of the covariance operator R^-1 M."""
        op = LinearOp(self.n, lambda x: self.apply_Rinv(self.M @ x), name="covariance_operator")
        if method == "exact":
            return float(np.trace(op.to_dense()))
        if method == "estimator":
            Z = rademacher(_rng(seed), self.n, num_probes)
            return float(np.mean(np.einsum("ij,ij->j", Z, op.apply_block(Z))))
        raise ValueError(f"Unknown trace method {method!r}")
