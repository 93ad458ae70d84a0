"""
Inverse-problem contract, reduced cost/gradient/Hessian evaluation and
finite-difference verification.
"""

import abc
import logging
from collections import Counter
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from inference.prior import BiLaplacianPrior
from numerics.linalg import LinearOp

logger = logging.getLogger(__name__)

DEFAULT_EPS_SWEEP = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


class HessianMode(str, Enum):
    FULL = "full"
    MISFIT_ONLY = "misfit_only"
    GAUSS_NEWTON = "gauss_newton"
    GAUSS_NEWTON_MISFIT = "gauss_newton_misfit"

    @property
    def gauss_newton(self) -> bool:
        return self in (HessianMode.GAUSS_NEWTON, HessianMode.GAUSS_NEWTON_MISFIT)

    @property
    def includes_prior(self) -> bool:
        return self in (HessianMode.FULL, HessianMode.GAUSS_NEWTON)


class InverseModel(abc.ABC):
    """
    PDE model with pointwise observations and Gaussian noise sigma^2 I.

    Implementations supply the state, adjoint and incremental solves; the
    reduced quantities are assembled by SolveContext.
    """

    param_space = None
    noise_variance: float = 1.0

    def __init__(self):
        self.counters = Counter()

    @property
    @abc.abstractmethod
    def num_observations(self) -> int:
        ...

    @abc.abstractmethod
    def solve_forward(self, m: np.ndarray):
        ...

    @abc.abstractmethod
    def solve_adjoint(self, u, m: np.ndarray):
        ...

    @abc.abstractmethod
    def observe(self, u) -> np.ndarray:
        """Predicted observations of a state."""

    @abc.abstractmethod
    def misfit_cost(self, u) -> float:
        ...

    @abc.abstractmethod
    def misfit_grad_m(self, u, p, m: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def solve_incremental_forward(self, u, m: np.ndarray, mhat: np.ndarray):
        ...

    @abc.abstractmethod
    def solve_incremental_adjoint(self, u, p, m: np.ndarray, uhat, mhat: np.ndarray, gauss_newton: bool = False):
        ...

    @abc.abstractmethod
    def hessian_terms(self, u, p, uhat, phat, m: np.ndarray, mhat: np.ndarray, gauss_newton: bool = False) -> np.ndarray:
        ...


class CorruptedAdjointModel(InverseModel):
    """Wraps a model and flips the sign of its adjoint; gradient checks must reject it."""

    def __init__(self, model: InverseModel):
        self._model = model
        self.counters = model.counters
        self.param_space = model.param_space
        self.noise_variance = model.noise_variance

    def __getattr__(self, name):
        return getattr(self._model, name)

    @property
    def num_observations(self) -> int:
        return self._model.num_observations

    def solve_forward(self, m):
        return self._model.solve_forward(m)

    def solve_adjoint(self, u, m):
        return -1.0 * self._model.solve_adjoint(u, m)

    def observe(self, u):
        return self._model.observe(u)

    def misfit_cost(self, u):
        return self._model.misfit_cost(u)

    def misfit_grad_m(self, u, p, m):
        return self._model.misfit_grad_m(u, p, m)

    def solve_incremental_forward(self, u, m, mhat):
        return self._model.solve_incremental_forward(u, m, mhat)

    def solve_incremental_adjoint(self, u, p, m, uhat, mhat, gauss_newton=False):
        return self._model.solve_incremental_adjoint(u, p, m, uhat, mhat, gauss_newton)

    def hessian_terms(self, u, p, uhat, phat, m, mhat, gauss_newton=False):
        return self._model.hessian_terms(u, p, uhat, phat, m, mhat, gauss_newton)


class CostBreakdown(BaseModel):
    total: float
    misfit: float
    reg: float


class SolveContext:
    """
    Reduced-space evaluations at one parameter point.

    Forward and adjoint states for the current m are cached and dropped as
    soon as a different m is requested. A context is owned by one thread.
    """

    def __init__(self, model: InverseModel, prior: BiLaplacianPrior):
        self.model = model
        self.prior = prior
        self._m: Optional[np.ndarray] = None
        self._u = None
        self._p = None
        self.hessian_applies = 0

    def _ensure_state(self, m: np.ndarray):
        m = np.asarray(m, dtype=float)
        if self._m is None or self._m.shape != m.shape or not np.array_equal(self._m, m):
            self._m = m.copy()
            self._u = self.model.solve_forward(self._m)
            self._p = None
        return self._u

    def _ensure_adjoint(self):
        if self._p is None:
            self._p = self.model.solve_adjoint(self._u, self._m)
        return self._p

    @property
    def state(self):
        return self._u

    @property
    def adjoint(self):
        return self._p

    def set_point(self, m: np.ndarray):
        self._ensure_state(m)
        self._ensure_adjoint()

    def cost(self, m: np.ndarray) -> CostBreakdown:
        u = self._ensure_state(m)
        misfit = float(self.model.misfit_cost(u))
        reg = self.prior.cost(m)
        return CostBreakdown(total=misfit + reg, misfit=misfit, reg=reg)

    def misfit_gradient(self, m: np.ndarray) -> np.ndarray:
        self.set_point(m)
        return self.model.misfit_grad_m(self._u, self._p, self._m)

    def gradient(self, m: np.ndarray) -> np.ndarray:
        return self.misfit_gradient(m) + self.prior.grad(m)

    def hessian_apply(self, mhat: np.ndarray, mode: HessianMode = HessianMode.FULL) -> np.ndarray:
        if self._m is None:
            raise RuntimeError("hessian_apply needs set_point first")
        mode = HessianMode(mode)
        self._ensure_adjoint()
        self.hessian_applies += 1
        mhat = np.asarray(mhat, dtype=float)
        gn = mode.gauss_newton
        uhat = self.model.solve_incremental_forward(self._u, self._m, mhat)
        phat = self.model.solve_incremental_adjoint(self._u, self._p, self._m, uhat, mhat, gauss_newton=gn)
        out = self.model.hessian_terms(self._u, self._p, uhat, phat, self._m, mhat, gauss_newton=gn)
        if mode.includes_prior:
            out = out + self.prior.apply_R(mhat)
        return out

    def hessian_op(self, mode: HessianMode = HessianMode.FULL) -> LinearOp:
        return LinearOp(self.prior.n, lambda x: self.hessian_apply(x, mode), symmetric=True, name=f"hessian_{HessianMode(mode).value}")


def synthetic_data(model: InverseModel, m_true: np.ndarray, noise_std: float, seed: int) -> np.ndarray:
    """Observations of the true field plus seeded Gaussian noise."""
    clean = np.asarray(model.observe(model.solve_forward(m_true)), dtype=float)
    return clean + noise_std * np.random.default_rng(seed).standard_normal(clean.shape)


def total_cost(model: InverseModel, prior: BiLaplacianPrior, m: np.ndarray):
    c = SolveContext(model, prior).cost(m)
    return c.total, c.misfit, c.reg


def gradient(model: InverseModel, prior: BiLaplacianPrior, m: np.ndarray) -> np.ndarray:
    return SolveContext(model, prior).gradient(m)


def hessian_apply(model: InverseModel, prior: BiLaplacianPrior, m: np.ndarray, mhat: np.ndarray, mode: HessianMode = HessianMode.FULL) -> np.ndarray:
    context = SolveContext(model, prior)
    context.set_point(m)
    return context.hessian_apply(mhat, mode)


class FDSweep(BaseModel):
    """Finite-difference errors of one random direction over a step sweep."""

    direction_seed: int
    eps: List[float]
    errors: List[float]

    @property
    def min_error(self) -> float:
        return min(self.errors)

    @property
    def best_eps(self) -> float:
        return self.eps[int(np.argmin(self.errors))]


class VerificationReport(BaseModel):
    name: str = Field(default="model", description="Label of the verified model")
    gradient_sweeps: List[FDSweep] = Field(default_factory=list)
    hessian_symmetry_error: Optional[float] = None
    hessian_fd_error: Optional[float] = None
    failures: List[str] = Field(default_factory=list)
    gradient_tol: float = 1e-5
    symmetry_tol: float = 1e-8
    hessian_fd_tol: float = 1e-4

    @property
    def gradient_min_error(self) -> float:
        if not self.gradient_sweeps:
            return float("inf")
        return max(s.min_error for s in self.gradient_sweeps)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"verification report: {self.name}"]
        for s in self.gradient_sweeps:
            lines.append(f"  gradient FD (seed {s.direction_seed}): min error {s.min_error:.3e} at eps {s.best_eps:.0e}")
        if self.hessian_symmetry_error is not None:
            lines.append(f"  Hessian symmetry: {self.hessian_symmetry_error:.3e}")
        if self.hessian_fd_error is not None:
            lines.append(f"  Hessian FD: {self.hessian_fd_error:.3e}")
        lines.append(f"  status: {'PASS' if self.passed else 'FAIL'}")
        lines.extend(f"  failure: {f}" for f in self.failures)
        return "\n".join(lines)

    def csv_rows(self):
        rows = []
        for s in self.gradient_sweeps:
            rows.extend({"seed": s.direction_seed, "eps": e, "fd_error": err} for e, err in zip(s.eps, s.errors))
        return rows


def verify_model(
    model: InverseModel,
    prior: BiLaplacianPrior,
    m0: np.ndarray,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    eps_values: Sequence[float] = DEFAULT_EPS_SWEEP,
    hessian_eps: float = 1e-5,
    name: str = "model",
) -> VerificationReport:
    """Gradient FD sweeps, Hessian symmetry and Hessian FD checks; never raises."""
    report = VerificationReport(name=name)
    try:
        context = SolveContext(model, prior)
        m0 = np.asarray(m0, dtype=float)
        g = context.gradient(m0)
        for seed in seeds:
            mhat = np.random.default_rng(seed).standard_normal(m0.size)
            slope = float(g @ mhat)
            errors = []
            for eps in eps_values:
                plus = context.cost(m0 + eps * mhat).total
                minus = context.cost(m0 - eps * mhat).total
                fd = (plus - minus) / (2.0 * eps)
                errors.append(abs(slope - fd) / max(abs(slope), 1e-300))
            sweep = FDSweep(direction_seed=int(seed), eps=list(eps_values), errors=errors)
            report.gradient_sweeps.append(sweep)
            if sweep.min_error >= report.gradient_tol:
                report.failures.append(f"gradient FD error {sweep.min_error:.3e} for direction seed {seed}")

        rng = np.random.default_rng(1000 + int(seeds[0]) if len(seeds) else 1000)
        m1, m2 = rng.standard_normal(m0.size), rng.standard_normal(m0.size)
        context.set_point(m0)
        h1 = context.hessian_apply(m1, HessianMode.FULL)
        h2 = context.hessian_apply(m2, HessianMode.FULL)
        scale = max(np.linalg.norm(h1) * np.linalg.norm(m2), 1e-300)
        report.hessian_symmetry_error = abs(h1 @ m2 - m1 @ h2) / scale
        if report.hessian_symmetry_error >= report.symmetry_tol:
            report.failures.append(f"Hessian symmetry error {report.hessian_symmetry_error:.3e}")

        g_plus = context.gradient(m0 + hessian_eps * m1)
        g_minus = context.gradient(m0 - hessian_eps * m1)
        fd = (g_plus - g_minus) / (2.0 * hessian_eps)
        report.hessian_fd_error = float(np.linalg.norm(h1 - fd) / max(np.linalg.norm(h1), 1e-300))
        if report.hessian_fd_error >= report.hessian_fd_tol:
            report.failures.append(f"Hessian FD error {report.hessian_fd_error:.3e}")
    except Exception as e:
        logger.error(f"Verification of {name} aborted: {e}", exc_info=True)
        report.failures.append(f"verification aborted: {e}")
    logger.info(f"Verification of {name}: {'PASS' if report.passed else 'FAIL'}")
    return report
