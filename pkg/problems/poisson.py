"""
Log-coefficient inversion for -div(exp(m) grad u) = f with pointwise data.

Dirichlet data on bottom/top (u = y by default), Neumann flux on the
remaining walls. The state is P2, the parameter P1; exp(m) is evaluated at
the quadrature points so the discrete gradient and Hessian are exact
derivatives of the discrete cost.
"""

import logging
from typing import Optional, Sequence

import numpy as np

from inference.model import InverseModel, synthetic_data
from inference.prior import BiLaplacianPrior
from numerics import fem
from numerics.linalg import SparseSolver
from stages import ExperimentRunner, ProblemBundle

logger = logging.getLogger(__name__)

DIRICHLET_TAGS = ("bottom", "top")


def default_truth(center=(0.5, 0.3)):
    cx, cy = center

    def m_true(x, y):
        return np.log(2.0 + 2.0 * np.exp(-50.0 * ((x - cx) ** 2 + (y - cy) ** 2)))

    return m_true


def random_points(count: int, window, seed: int) -> np.ndarray:
    x0, y0, x1, y1 = window
    u = np.random.default_rng(seed).random((count, 2))
    return np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])


class PoissonModel(InverseModel):
    def __init__(
        self,
        mesh: fem.Mesh,
        observation_points,
        data: Optional[np.ndarray] = None,
        noise_std: float = 0.01,
        source: fem.ValueFn = 0.0,
        dirichlet_value: fem.ValueFn = lambda x, y: y,
        neumann_flux: fem.ValueFn = 0.0,
        dirichlet_tags: Sequence[str] = DIRICHLET_TAGS,
        state_degree: int = 2,
        param_degree: int = 1,
        solver: str = "direct",
    ):
        super().__init__()
        if noise_std <= 0.0:
            raise ValueError(f"noise_std must be positive, got {noise_std}")
        self.mesh = mesh
        self.state_space = fem.FnSpace(mesh, state_degree)
        self.param_space = fem.FnSpace(mesh, param_degree)
        self.quadrature = fem.Quadrature.for_degree(4)
        self.observation_points = np.asarray(observation_points, dtype=float).reshape(-1, 2)
        self.B = fem.point_observation(self.state_space, self.observation_points)
        self.noise_variance = float(noise_std) ** 2
        self.data = np.zeros(self.num_observations) if data is None else np.asarray(data, dtype=float)
        self.dirichlet_tags = tuple(dirichlet_tags)
        self.dirichlet_value = dirichlet_value
        self.solver = solver
        self._bc_dofs = self.state_space.boundary_dofs(self.dirichlet_tags)

        self.load = fem.assemble_load(self.state_space, source, self.quadrature)
        neumann_tags = sorted(mesh.tags - set(self.dirichlet_tags))
        if neumann_tags:
            self.load = self.load + fem.assemble_boundary_load(self.state_space, neumann_flux, neumann_tags)

        self._factor_m: Optional[np.ndarray] = None
        self._factor = None
        self._rhs = None
        self._weight = None
        logger.debug(f"Poisson model: state {self.state_space}, parameter {self.param_space}, q={self.num_observations}")

    @property
    def num_observations(self) -> int:
        return self.B.shape[0]

    def coefficient_at_quadrature(self, m: np.ndarray) -> np.ndarray:
        return np.exp(fem.evaluate_at_quadrature(self.param_space, m, self.quadrature))

    def _operator(self, m: np.ndarray):
        """Factorized Dirichlet-eliminated operator at m, reused until m changes."""
        m = np.asarray(m, dtype=float)
        if self._factor_m is None or not np.array_equal(self._factor_m, m):
            weight = self.coefficient_at_quadrature(m)
            A = fem.assemble_weighted_stiffness(self.state_space, weight, self.quadrature)
            A_bc, rhs = fem.apply_dirichlet(A, self.load, self.state_space, self.dirichlet_tags, self.dirichlet_value)
            self._factor = SparseSolver(A_bc, method=self.solver, rtol=1e-12)
            self._factor_m, self._rhs, self._weight = m.copy(), rhs, weight
            self.counters["factorizations"] += 1
        return self._factor

    def _solve_homogeneous(self, rhs: np.ndarray, m: np.ndarray) -> np.ndarray:
        solver = self._operator(m)
        rhs = np.array(rhs, dtype=float)
        rhs[self._bc_dofs] = 0.0
        return solver.solve(rhs)

    def _mhat_weight(self, m, mhat):
        self._operator(m)
        return fem.evaluate_at_quadrature(self.param_space, mhat, self.quadrature) * self._weight

    def solve_forward(self, m: np.ndarray) -> np.ndarray:
        solver = self._operator(m)
        self.counters["forward"] += 1
        return solver.solve(self._rhs)

    def observe(self, u: np.ndarray) -> np.ndarray:
        return self.B @ u

    def residual(self, u: np.ndarray) -> np.ndarray:
        return self.B @ u - self.data

    def misfit_cost(self, u: np.ndarray) -> float:
        r = self.residual(u)
        return 0.5 * float(r @ r) / self.noise_variance

    def solve_adjoint(self, u: np.ndarray, m: np.ndarray) -> np.ndarray:
        self.counters["adjoint"] += 1
        return self._solve_homogeneous(-(self.B.T @ self.residual(u)) / self.noise_variance, m)

    def misfit_grad_m(self, u, p, m) -> np.ndarray:
        self._operator(m)
        return fem.weighted_gradient_inner(self.param_space, self.state_space, self._weight, u, p, self.quadrature)

    def gradient_field(self, u, p, m) -> np.ndarray:
        return self.misfit_grad_m(u, p, m)

    def solve_incremental_forward(self, u, m, mhat) -> np.ndarray:
        self.counters["incremental_forward"] += 1
        rhs = -fem.stiffness_action(self.state_space, self._mhat_weight(m, mhat), u, self.quadrature)
        return self._solve_homogeneous(rhs, m)

    def solve_incremental_adjoint(self, u, p, m, uhat, mhat, gauss_newton: bool = False) -> np.ndarray:
        self.counters["incremental_adjoint"] += 1
        rhs = -(self.B.T @ (self.B @ uhat)) / self.noise_variance
        if not gauss_newton:
            rhs = rhs - fem.stiffness_action(self.state_space, self._mhat_weight(m, mhat), p, self.quadrature)
        return self._solve_homogeneous(rhs, m)

    def hessian_terms(self, u, p, uhat, phat, m, mhat, gauss_newton: bool = False) -> np.ndarray:
        self._operator(m)
        Vm, Vu, quad = self.param_space, self.state_space, self.quadrature
        out = fem.weighted_gradient_inner(Vm, Vu, self._weight, u, phat, quad)
        if not gauss_newton:
            out = out + fem.weighted_gradient_inner(Vm, Vu, self._weight, uhat, p, quad)
            out = out + fem.weighted_gradient_inner(Vm, Vu, self._mhat_weight(m, mhat), u, p, quad)
        return out


def build_prior(space: fem.FnSpace, prior_cfg) -> BiLaplacianPrior:
    Theta = None
    if prior_cfg.anisotropic:
        Theta = fem.anisotropic_tensor(prior_cfg.alpha, prior_cfg.theta1, prior_cfg.theta2)
    mean = np.full(space.n, prior_cfg.mean)
    return BiLaplacianPrior(space, prior_cfg.gamma, prior_cfg.delta, Theta, robin_constant=prior_cfg.robin_constant, mean=mean, solver=prior_cfg.solver)


def build_problem(cfg):
    """Mesh, model, prior and synthetic data for a poisson run config."""
    mesh = fem.build_unit_square_mesh(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.holes)
    obs = cfg.observations
    points = random_points(obs.count, obs.window, cfg.seeds.obs_points)
    model = PoissonModel(mesh, points, noise_std=np.sqrt(obs.variance), state_degree=cfg.poisson.state_degree, solver=cfg.prior.solver)
    prior = build_prior(model.param_space, cfg.prior)
    m_true = fem.interpolate(model.param_space, default_truth(cfg.poisson.truth_center))
    if model.num_observations:
        model.data = synthetic_data(model, m_true, np.sqrt(obs.variance), cfg.seeds.noise)
    logger.info(f"Poisson problem: {cfg.mesh.nx}x{cfg.mesh.ny} mesh, {model.param_space.n} parameters, {model.state_space.n} state dofs, q={model.num_observations}")
    return ProblemBundle(
        name="poisson",
        model=model,
        prior=prior,
        m_true=m_true,
        m0=prior.mean.copy(),
        observation_points=points,
        obs_window=tuple(obs.window),
    )


def run_experiment(cfg, output_dir: Optional[str] = None):
    """Data, MAP, spectrum, variances and samples for the poisson problem; returns the run summary."""
    return ExperimentRunner(build_problem(cfg), cfg, output_dir).run()
