"""
Inexact Newton-CG for the MAP point, globalized with Armijo backtracking.
"""

import csv
import logging
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from inference.model import HessianMode, SolveContext
from inference.prior import BiLaplacianPrior
from numerics.linalg import CGTermination, cg_solve

logger = logging.getLogger(__name__)


class NewtonConfig(BaseModel):
    """Newton-CG settings."""

    max_iter: int = Field(default=20, ge=0, description="Maximum Newton iterations")
    max_backtracking_iter: int = Field(default=10, ge=1, description="Maximum step halvings per line search")
    grad_atol: float = Field(default=1e-9, gt=0.0, description="Absolute gradient-norm tolerance")
    grad_rtol: float = Field(default=1e-6, gt=0.0, lt=1.0, description="Gradient-norm tolerance relative to the initial gradient")
    c_armijo: float = Field(default=1e-4, gt=0.0, lt=1.0, description="Armijo sufficient-decrease constant")
    hessian_mode: HessianMode = Field(default=HessianMode.FULL, description="Hessian used by the inner CG")
    gn_iter: int = Field(default=0, ge=0, description="Leading iterations that use the Gauss-Newton Hessian")
    cg_max_iter: int = Field(default=100, ge=0, description="Maximum inner CG iterations")
    eta_max: float = Field(default=0.5, gt=0.0, lt=1.0, description="Cap of the forcing term")

    @field_validator("hessian_mode")
    @classmethod
    def _newton_modes(cls, v):
        if v not in (HessianMode.FULL, HessianMode.GAUSS_NEWTON):
            raise ValueError("hessian_mode must be 'full' or 'gauss_newton'")
        return v


class NewtonIteration(BaseModel):
    iter: int
    cost: float
    misfit: float
    reg: float
    gradnorm: float
    cg_iters: int = 0
    alpha: float = 0.0
    eta: float = 0.0
    cg_reason: str = ""
    cg_residual: float = 0.0
    note: str = ""


class NewtonTrace(BaseModel):
    iterations: List[NewtonIteration] = Field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def num_iterations(self) -> int:
        return sum(1 for it in self.iterations if it.alpha > 0.0)

    @property
    def total_cg_iterations(self) -> int:
        return sum(it.cg_iters for it in self.iterations)

    @property
    def costs(self) -> List[float]:
        return [it.cost for it in self.iterations]

    def write_csv(self, path):
        fields = ["iter", "cost", "misfit", "reg", "gradnorm", "cg_iters", "alpha"]
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(fields)
            for it in self.iterations:
                writer.writerow([it.iter, repr(it.cost), repr(it.misfit), repr(it.reg), repr(it.gradnorm), it.cg_iters, repr(it.alpha)])


class LineSearchResult(BaseModel):
    model_config = {"arbitrary_types_allowed": True}

    m: np.ndarray
    alpha: float
    evaluations: int
    cost: float
    accepted: bool
    replaced_direction: bool = False


def armijo_linesearch(
    cost_fn: Callable[[np.ndarray], float],
    m: np.ndarray,
    direction: np.ndarray,
    g: np.ndarray,
    cfg: NewtonConfig,
    cost_m: Optional[float] = None,
    fallback: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> LineSearchResult:
    """
    Backtrack alpha = 2^-j until cost(m + alpha d) < cost(m) + alpha c gᵀd.

    A direction that is not a descent direction is replaced by
    -fallback(g) (or -g).
    """
    m = np.asarray(m, dtype=float)
    d = np.asarray(direction, dtype=float)
    evaluations = 0
    if cost_m is None:
        cost_m = cost_fn(m)
        evaluations += 1
    replaced = False
    slope = float(g @ d)
    if not slope < 0.0:
        d = -(fallback(g) if fallback is not None else g)
        slope = float(g @ d)
        replaced = True
        logger.info("Search direction is not a descent direction; using the preconditioned gradient")
    alpha = 1.0
    for _ in range(cfg.max_backtracking_iter):
        trial = m + alpha * d
        c = cost_fn(trial)
        evaluations += 1
        if c < cost_m + alpha * cfg.c_armijo * slope:
            return LineSearchResult(m=trial, alpha=alpha, evaluations=evaluations, cost=c, accepted=True, replaced_direction=replaced)
        alpha *= 0.5
    logger.warning(f"Line search exhausted after {cfg.max_backtracking_iter} backtracking steps")
    return LineSearchResult(m=m, alpha=0.0, evaluations=evaluations, cost=cost_m, accepted=False, replaced_direction=replaced)


def solve(model, prior: BiLaplacianPrior, m0: np.ndarray, cfg: Optional[NewtonConfig] = None, context: Optional[SolveContext] = None):
    """Returns (m_MAP, NewtonTrace)."""
    cfg = cfg or NewtonConfig()
    context = context or SolveContext(model, prior)
    m = np.asarray(m0, dtype=float).copy()
    trace = NewtonTrace()

    cost = context.cost(m)
    g = context.gradient(m)
    g0norm = float(np.linalg.norm(g))
    tol = max(cfg.grad_atol, cfg.grad_rtol * g0norm)
    Rinv = prior.Rinv_op

    for it in range(cfg.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        record = NewtonIteration(iter=it, cost=cost.total, misfit=cost.misfit, reg=cost.reg, gradnorm=gnorm)
        trace.iterations.append(record)
        if gnorm <= tol:
            trace.converged, trace.reason = True, "gradient tolerance"
            break
        if it == cfg.max_iter:
            trace.reason = "max_iter"
            break

        eta = min(cfg.eta_max, max(np.sqrt(gnorm / g0norm), 1e-9 * g0norm / gnorm))
        mode = HessianMode.GAUSS_NEWTON if it < cfg.gn_iter else cfg.hessian_mode
        context.set_point(m)
        cg = cg_solve(context.hessian_op(mode), -g, precond=Rinv, rtol=eta, max_iter=cfg.cg_max_iter, monitor_curvature=True)
        mhat = cg.x
        if cg.iterations == 0 and cg.reason != CGTermination.NEGATIVE_CURVATURE:
            mhat = -Rinv(g)
            record.note = "preconditioned gradient step"

        record.eta = float(eta)
        record.cg_iters = cg.iterations
        record.cg_reason = cg.reason.value
        record.cg_residual = cg.residual_norm

        search = armijo_linesearch(lambda x: context.cost(x).total, m, mhat, g, cfg, cost_m=cost.total, fallback=Rinv)
        if search.replaced_direction:
            record.note = "direction replaced by preconditioned gradient"
        if not search.accepted:
            trace.reason = "line search failed"
            logger.warning(f"Newton iteration {it}: line search failed; returning best iterate")
            break
        record.alpha = search.alpha
        m = search.m
        cost = context.cost(m)
        g = context.gradient(m)
        logger.info(f"Newton {it}: cost={cost.total:.6e} |g|={np.linalg.norm(g):.3e} cg={cg.iterations} alpha={search.alpha:g}")

    logger.info(f"Newton-CG finished ({trace.reason}) after {trace.num_iterations} steps, {trace.total_cg_iterations} CG iterations")
    return m, trace
