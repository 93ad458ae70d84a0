"""
Laplace approximation N(m_MAP, H^-1) with H = R + H_misfit.

The misfit Hessian enters only through the leading generalized eigenpairs
H_misfit v = lambda R v (V^T R V = I), giving

    H^-1     = R^-1 - V D V^T,             D = diag(lambda / (1 + lambda))
    samples  = m_MAP + (I - V S V^T R) x,  S = diag(1 - 1/sqrt(1 + lambda))

with x a zero-mean prior sample.
"""

import logging
from typing import Optional

import numpy as np

from inference.model import HessianMode, SolveContext
from inference.prior import BiLaplacianPrior
from numerics.randeig import SOLVERS, GHEPConfig, GHEPResult, eigen_residuals

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_CUT = 0.07
NEGATIVE_EIGENVALUE_TOL = -1e-8
EIGEN_RESIDUAL_TOL = 1e-4


class LaplacePosterior:
    def __init__(
        self,
        m_map: np.ndarray,
        prior: BiLaplacianPrior,
        eigenvalues: np.ndarray,
        vectors: np.ndarray,
        ghep: Optional[GHEPResult] = None,
        lambda_cut: float = DEFAULT_LAMBDA_CUT,
    ):
        self.m_map = np.asarray(m_map, dtype=float).copy()
        self.prior = prior
        self.lambda_cut = float(lambda_cut)
        self.ghep = ghep
        self.eigenvalues = np.asarray(eigenvalues, dtype=float).copy()
        self.vectors = np.asarray(vectors, dtype=float).reshape(prior.n, -1).copy()
        self.counters = dict(ghep.counters) if ghep is not None else {}
        self.eigen_residuals: Optional[np.ndarray] = None

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    @property
    def d(self) -> np.ndarray:
        return self.eigenvalues / (1.0 + self.eigenvalues)

    @property
    def s(self) -> np.ndarray:
        return 1.0 - 1.0 / np.sqrt(1.0 + self.eigenvalues)

    def apply_Hinv(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        out = self.prior.apply_Rinv(w)
        if self.rank:
            out = out - self.vectors @ (self.d * (self.vectors.T @ w))
        return out

    def correction_field(self) -> np.ndarray:
        """sum_i d_i v_i^2, the pointwise variance removed by the data."""
        if not self.rank:
            return np.zeros(self.prior.n)
        return (self.vectors**2) @ self.d

    def pointwise_variance(self, method: str = "randomized", rank: int = 100, num_probes: int = 100, seed: int = 0, threads: int = 1) -> np.ndarray:
        prior_var = self.prior.pointwise_variance(method=method, rank=rank, num_probes=num_probes, seed=seed, threads=threads)
        return prior_var - self.correction_field()

    def trace(self, method: str = "exact", num_probes: int = 100, seed: int = 0) -> float:
        """Trace of H^-1 M: the prior trace less sum_i d_i v_i^T M v_i."""
        prior_trace = self.prior.trace(method, num_probes, seed)
        if not self.rank:
            return prior_trace
        MV = self.prior.M @ self.vectors
        return prior_trace - float(np.sum(self.d * np.einsum("ij,ij->j", self.vectors, MV)))

    def apply_sample_map(self, x: np.ndarray) -> np.ndarray:
        """(I - V S V^T R) x for a zero-mean prior fluctuation x."""
        x = np.asarray(x, dtype=float)
        if not self.rank:
            return x.copy()
        return x - self.vectors @ (self.s * (self.vectors.T @ self.prior.apply_R(x)))

    def sample(self, seed: int) -> np.ndarray:
        # spawn_key keeps posterior draws independent of prior draws with the same seed
        x = self.prior.sample(np.random.SeedSequence(int(seed), spawn_key=(1,)), add_mean=False)
        return self.m_map + self.apply_sample_map(x)

    def verify_eigenpairs(self, hessian_op, count: Optional[int] = None) -> np.ndarray:
        """Relative residuals ||H v - lambda R v|| / (lambda ||R v||) for the top half of the kept pairs."""
        if not self.rank:
            self.eigen_residuals = np.zeros(0)
            return self.eigen_residuals
        count = max(1, self.rank // 2) if count is None else min(count, self.rank)
        kept = GHEPResult(self.eigenvalues, self.vectors, "kept")
        self.eigen_residuals = eigen_residuals(hessian_op, self.prior.R_op, kept, count)
        worst = float(self.eigen_residuals.max())
        if worst > EIGEN_RESIDUAL_TOL:
            logger.warning(f"Posterior eigenpair residual {worst:.2e} exceeds {EIGEN_RESIDUAL_TOL:g}")
        return self.eigen_residuals


def build(
    model,
    prior: BiLaplacianPrior,
    m_map: np.ndarray,
    cfg: Optional[GHEPConfig] = None,
    solver: str = "double",
    mode: HessianMode = HessianMode.GAUSS_NEWTON_MISFIT,
    lambda_cut: float = DEFAULT_LAMBDA_CUT,
    verify: bool = True,
    context: Optional[SolveContext] = None,
) -> LaplacePosterior:
    """Low-rank GHEP of (H_misfit, R) at m_MAP, clipped at lambda_cut."""
    cfg = cfg or GHEPConfig()
    if solver not in SOLVERS:
        raise ValueError(f"Unknown eigensolver {solver!r}; choose from {sorted(SOLVERS)}")
    mode = HessianMode(mode)
    if mode.includes_prior:
        raise ValueError(f"The posterior eigenproblem needs a misfit-only Hessian, got {mode.value}")

    if model.num_observations == 0:
        logger.info("No observations: posterior equals the prior")
        return LaplacePosterior(m_map, prior, np.zeros(0), np.zeros((prior.n, 0)), lambda_cut=lambda_cut)

    context = context or SolveContext(model, prior)
    context.set_point(m_map)
    H = context.hessian_op(mode)
    result = SOLVERS[solver](H, prior.R_op, prior.Rinv_op, cfg)

    values = result.eigenvalues
    if values.size and values.min() < NEGATIVE_EIGENVALUE_TOL:
        logger.warning(f"Misfit Hessian eigenvalue {values.min():.3e} is negative; clipped")
    keep = values > lambda_cut
    posterior = LaplacePosterior(m_map, prior, values[keep], result.vectors[:, keep], result, lambda_cut)
    logger.info(f"Posterior from {solver} pass: kept {posterior.rank} of {values.size} eigenpairs above {lambda_cut:g}, counters={result.counters}")

    if verify and posterior.rank:
        posterior.verify_eigenpairs(H)
    return posterior


def apply_Hinv(posterior: LaplacePosterior, w: np.ndarray) -> np.ndarray:
    return posterior.apply_Hinv(w)


def sample_posterior(posterior: LaplacePosterior, seed: int) -> np.ndarray:
    return posterior.sample(seed)


def posterior_pointwise_variance(posterior: LaplacePosterior, rank: int = 100, method: str = "randomized", seed: int = 0, threads: int = 1) -> np.ndarray:
    return posterior.pointwise_variance(method=method, rank=rank, seed=seed, threads=threads)
