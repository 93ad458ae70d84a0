"""
Initial-condition inversion for u_t - kappa lap u + v . grad u = 0.

Implicit Euler in time with homogeneous Neumann walls (outer boundary and
building holes), Galerkin least-squares stabilization of the convective
term, and the step matrix factored once per model. The adjoint is the exact
transpose of the discrete time stepper, so gradients and Hessian actions
are exact for the discrete cost.
"""

import copy
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from inference.model import HessianMode, InverseModel, SolveContext, synthetic_data
from inference.prior import BiLaplacianPrior
from numerics import fem
from numerics.linalg import CGResult, ConvergenceError, SparseSolver, cg_solve
from numerics.randeig import SOLVERS, GHEPConfig
from stages import ExperimentRunner, ProblemBundle
from utils import read_field

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9


class VelocityField:
    """Piecewise-polynomial velocity evaluated at quadrature points."""

    def at_quadrature(self, space: fem.FnSpace, quadrature: Optional[fem.Quadrature] = None) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, points) -> np.ndarray:
        raise NotImplementedError

    def nodal(self, space: fem.FnSpace) -> np.ndarray:
        return self.evaluate(space.dof_coords)

    def weak_divergence(self, space: fem.FnSpace, quadrature: Optional[fem.Quadrature] = None) -> np.ndarray:
        return fem.weak_divergence(space, self.at_quadrature(space, quadrature), quadrature)

    def max_speed(self, space: fem.FnSpace, quadrature: Optional[fem.Quadrature] = None) -> float:
        return float(np.linalg.norm(self.at_quadrature(space, quadrature), axis=2).max())


class StreamFunctionVelocity(VelocityField):
    """
    v = (-d psi/dy, d psi/dx) for a P2 stream function.

    The stream function is zero on the outer walls and constant on each
    hole boundary, so v . n = 0 on every wall and v is divergence free.
    """

    def __init__(self, mesh: fem.Mesh, psi_fn: fem.ValueFn, max_speed: float = 1.0):
        self.space = fem.FnSpace(mesh, 2)
        psi = fem.interpolate(self.space, psi_fn)
        outer = mesh.boundary_tags != "hole"
        psi[np.unique(self.space.boundary_edge_dofs[outer])] = 0.0
        for hole in np.unique(mesh.boundary_hole_ids[mesh.boundary_hole_ids >= 0]):
            dofs = np.unique(self.space.boundary_edge_dofs[mesh.boundary_hole_ids == hole])
            psi[dofs] = psi[dofs].mean()
        self.psi = psi
        self.scale = 1.0
        speed = self.max_speed(self.space, fem.Quadrature.for_degree(4))
        self.scale = max_speed / speed if speed > 0.0 else 1.0

    def at_quadrature(self, space: fem.FnSpace, quadrature: Optional[fem.Quadrature] = None) -> np.ndarray:
        if space.mesh is not self.space.mesh:
            raise fem.FemError("Velocity and state spaces live on different meshes")
        g = fem.gradient_at_quadrature(self.space, self.psi, quadrature or space.default_quadrature())
        return self.scale * np.stack([-g[..., 1], g[..., 0]], axis=-1)

    def evaluate(self, points) -> np.ndarray:
        g = fem.gradient_at_points(self.space, self.psi, points)
        return self.scale * np.column_stack([-g[:, 1], g[:, 0]])


class NodalVelocity(VelocityField):
    """Velocity given by nodal (vx, vy) values in a Lagrange space."""

    def __init__(self, space: fem.FnSpace, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (space.n, 2):
            raise fem.FemError(f"Velocity field has {values.shape[0]} rows of {values.shape[1:]} values, expected {space.n} rows of (vx, vy)")
        self.space = space
        self.values = values

    def at_quadrature(self, space: fem.FnSpace, quadrature: Optional[fem.Quadrature] = None) -> np.ndarray:
        quad = quadrature or space.default_quadrature()
        return np.stack([fem.evaluate_at_quadrature(self.space, self.values[:, k], quad) for k in range(2)], axis=-1)

    def evaluate(self, points) -> np.ndarray:
        B = fem.point_observation(self.space, points)
        return np.asarray(B @ self.values)

    @classmethod
    def from_file(cls, space: fem.FnSpace, path: str) -> "NodalVelocity":
        coords, values = read_field(path)
        if coords.shape[0] != space.n or values.shape[1] != 2:
            raise fem.FemError(f"Velocity file {path} has {coords.shape[0]} rows with {values.shape[1]} value columns; expected {space.n} rows with 2")
        if not np.allclose(coords, space.dof_coords, atol=1e-10):
            raise fem.FemError(f"Velocity file {path} coordinates do not match the dofs of {space}")
        return cls(space, values)


def stream_function(x, y):
    return np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2 / np.pi


def default_velocity(mesh: fem.Mesh) -> StreamFunctionVelocity:
    return StreamFunctionVelocity(mesh, stream_function)


class TimeSeriesField:
    """States at time nodes 0..N; node 0 is the initial condition."""

    def __init__(self, values: np.ndarray, dt: float):
        self.values = np.asarray(values, dtype=float)
        self.dt = float(dt)

    @property
    def num_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[0])

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    def __mul__(self, scalar):
        return TimeSeriesField(self.values * float(scalar), self.dt)

    __rmul__ = __mul__

    def __neg__(self):
        return TimeSeriesField(-self.values, self.dt)


def gls_tau(mesh: fem.Mesh, velocity_q: np.ndarray, kappa: float) -> np.ndarray:
    h = mesh.diameters
    speed = np.linalg.norm(velocity_q, axis=2).mean(axis=1)
    return 1.0 / (4.0 * kappa / h**2 + 2.0 * speed / h)


class AdvDiffModel(InverseModel):
    def __init__(
        self,
        mesh: fem.Mesh,
        velocity: VelocityField,
        observation_points,
        observation_times: Sequence[float],
        kappa: float = 1e-3,
        t_final: float = 4.0,
        num_steps: int = 40,
        noise_variance: float = 2.45e-7,
        data: Optional[np.ndarray] = None,
        gls: bool = True,
        state_degree: int = 1,
        param_degree: int = 1,
    ):
        super().__init__()
        if kappa <= 0.0 or t_final <= 0.0 or num_steps < 1 or noise_variance <= 0.0:
            raise ValueError(f"Invalid physics: kappa={kappa}, t_final={t_final}, num_steps={num_steps}, noise_variance={noise_variance}")
        self.mesh = mesh
        self.velocity = velocity
        self.kappa = float(kappa)
        self.t_final = float(t_final)
        self.num_steps = int(num_steps)
        self.dt = self.t_final / self.num_steps
        self.noise_variance = float(noise_variance)
        self.gls = gls
        self.state_space = fem.FnSpace(mesh, state_degree)
        self.param_space = fem.FnSpace(mesh, param_degree)
        self.quadrature = self.state_space.default_quadrature()

        self.observation_points = np.asarray(observation_points, dtype=float).reshape(-1, 2)
        self.B = fem.point_observation(self.state_space, self.observation_points)
        self.observation_times = np.asarray(observation_times, dtype=float)
        self.obs_steps = self._snap_times(self.observation_times)

        self.P = fem.interpolation_matrix(self.param_space, self.state_space)
        self.M = fem.assemble_mass(self.state_space, self.quadrature)
        self.K = fem.assemble_stiffness(self.state_space, quadrature=self.quadrature)
        v_q = velocity.at_quadrature(self.state_space, self.quadrature)
        self.N = fem.assemble_advection(self.state_space, v_q, self.quadrature)
        S = self.M / self.dt + self.kappa * self.K + self.N
        if gls:
            S = S + fem.assemble_streamline_diffusion(self.state_space, v_q, gls_tau(mesh, v_q, self.kappa), self.quadrature)
        self.S = S.tocsr()
        self.step_solver = SparseSolver(self.S, method="direct")
        self.M_dt = (self.M / self.dt).tocsr()
        self.data = np.zeros((self.obs_steps.size, self.B.shape[0])) if data is None else np.asarray(data, dtype=float)
        logger.debug(f"AdvDiff model: {self.state_space}, dt={self.dt:g}, {self.obs_steps.size} observation times, {self.B.shape[0]} points")

    def _snap_times(self, times: np.ndarray) -> np.ndarray:
        steps = np.rint(times / self.dt).astype(np.int64)
        off = np.abs(steps * self.dt - times) > TIME_TOL * max(1.0, self.t_final)
        if np.any(off):
            raise ValueError(f"Observation times {times[off].tolist()} are not on the time grid (dt={self.dt:g})")
        if np.any(steps < 1) or np.any(steps > self.num_steps):
            raise ValueError(f"Observation times must lie in (0, {self.t_final:g}], got {times.tolist()}")
        if np.unique(steps).size != steps.size:
            raise ValueError("Observation times must be distinct")
        return steps

    @property
    def num_observations(self) -> int:
        return self.obs_steps.size * self.B.shape[0]

    def restricted(self, t_min: float, t_max: float) -> "AdvDiffModel":
        """Same model observing only at times in (t_min, t_max]."""
        keep = (self.observation_times > t_min + TIME_TOL) & (self.observation_times <= t_max + TIME_TOL)
        sub = copy.copy(self)
        sub.observation_times = self.observation_times[keep]
        sub.obs_steps = self.obs_steps[keep]
        sub.data = self.data[keep]
        return sub

    def _march(self, u0: np.ndarray) -> TimeSeriesField:
        U = np.empty((self.num_steps + 1, u0.size))
        U[0] = u0
        for k in range(self.num_steps):
            U[k + 1] = self.step_solver.solve(self.M_dt @ U[k])
        return TimeSeriesField(U, self.dt)

    def _march_back(self, sources: np.ndarray) -> TimeSeriesField:
        """Solves S^T p^k = (M/dt) p^(k+1) - r_(k+1)/dt from p^N = 0; sources[i] is r at obs_steps[i]."""
        r = np.zeros((self.num_steps + 1, self.state_space.n))
        r[self.obs_steps] = sources
        P = np.zeros_like(r)
        for k in range(self.num_steps - 1, -1, -1):
            P[k] = self.step_solver.solve_transpose(self.M_dt @ P[k + 1] - r[k + 1] / self.dt)
        return TimeSeriesField(P, self.dt)

    def solve_forward(self, m: np.ndarray) -> TimeSeriesField:
        self.counters["forward"] += 1
        return self._march(self.P @ np.asarray(m, dtype=float))

    def observe(self, u: TimeSeriesField) -> np.ndarray:
        return (self.B @ u.values[self.obs_steps].T).T

    def residual(self, u: TimeSeriesField) -> np.ndarray:
        return self.observe(u) - self.data

    def misfit_cost(self, u: TimeSeriesField) -> float:
        r = self.residual(u)
        return 0.5 * float(np.sum(r * r)) / self.noise_variance

    def solve_adjoint(self, u: TimeSeriesField, m: np.ndarray) -> TimeSeriesField:
        self.counters["adjoint"] += 1
        return self._march_back((self.B.T @ self.residual(u).T).T / self.noise_variance)

    def misfit_grad_m(self, u, p: TimeSeriesField, m) -> np.ndarray:
        return -(self.P.T @ (self.M @ p.values[0]))

    def gradient_field(self, p: TimeSeriesField, m: np.ndarray, prior: BiLaplacianPrior) -> np.ndarray:
        return self.misfit_grad_m(None, p, m) + prior.grad(m)

    def solve_incremental_forward(self, u, m, mhat) -> TimeSeriesField:
        self.counters["incremental_forward"] += 1
        return self._march(self.P @ np.asarray(mhat, dtype=float))

    def solve_incremental_adjoint(self, u, p, m, uhat: TimeSeriesField, mhat, gauss_newton: bool = False) -> TimeSeriesField:
        # linear map: the Gauss-Newton and full Hessians coincide
        self.counters["incremental_adjoint"] += 1
        obs = (self.B @ uhat.values[self.obs_steps].T).T
        return self._march_back((self.B.T @ obs.T).T / self.noise_variance)

    def hessian_terms(self, u, p, uhat, phat: TimeSeriesField, m, mhat, gauss_newton: bool = False) -> np.ndarray:
        return -(self.P.T @ (self.M @ phat.values[0]))

    def apply_p2o(self, m: np.ndarray) -> np.ndarray:
        """Flattened observations of the trajectory started from m."""
        return self.observe(self._march(self.P @ np.asarray(m, dtype=float))).ravel()

    def apply_p2o_adjoint(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(self.obs_steps.size, self.B.shape[0])
        p = self._march_back((self.B.T @ w.T).T)
        return -(self.P.T @ (self.M @ p.values[0]))


def solve_map_cg(model: AdvDiffModel, prior: BiLaplacianPrior, tol: float = 1e-6, max_iter: Optional[int] = None, m0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, CGResult]:
    """
    MAP of the linear problem: CG on the normal operator, preconditioned by the prior covariance.

    Raises ConvergenceError when CG stops before reaching ``tol``.
    """
    m0 = prior.mean.copy() if m0 is None else np.asarray(m0, dtype=float)
    context = SolveContext(model, prior)
    g0 = context.gradient(m0)
    H = context.hessian_op()
    result = cg_solve(H, -g0, precond=prior.Rinv_op, rtol=tol, max_iter=max_iter or 2 * prior.n)
    logger.info(f"Linear MAP solve: {result.iterations} CG iterations ({result.reason.value}), residual {result.residual_norm:.3e}")
    if not result.converged:
        raise ConvergenceError(
            f"Linear MAP solve stopped after {result.iterations} CG iterations ({result.reason.value}); "
            f"relative residual {result.residual_norm / result.rhs_norm:.3e} above {tol:g}"
        )
    return m0 + result.x, result


def random_points_outside_holes(count: int, holes, margin: float, seed: int, window=(0.0, 0.0, 1.0, 1.0)) -> np.ndarray:
    """Uniform points in the window, at least margin away from walls and holes."""
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = window
    lo = np.array([max(x0, margin), max(y0, margin)])
    hi = np.array([min(x1, 1.0 - margin), min(y1, 1.0 - margin)])
    points: List[np.ndarray] = []
    while len(points) < count:
        p = lo + (hi - lo) * rng.random(2)
        if all(not (h[0] - margin <= p[0] <= h[2] + margin and h[1] - margin <= p[1] <= h[3] + margin) for h in holes):
            points.append(p)
    return np.array(points).reshape(-1, 2)


def default_truth(center=(0.35, 0.7)):
    cx, cy = center

    def m_true(x, y):
        return np.minimum(0.5, np.exp(-100.0 * ((x - cx) ** 2 + (y - cy) ** 2)))

    return m_true


def compute_window_spectra(model: AdvDiffModel, prior: BiLaplacianPrior, windows, cfg: GHEPConfig, solver: str = "double"):
    """Leading eigenvalues of (H_misfit, R) when observing only in each window (t0, t1]."""
    if not windows:
        raise ValueError("At least one observation window is required")
    spectra = []
    for t0, t1 in windows:
        sub = model.restricted(t0, t1)
        if sub.num_observations == 0:
            raise ValueError(f"Window ({t0:g}, {t1:g}] contains no observation times")
        context = SolveContext(sub, prior)
        context.set_point(prior.mean)
        result = SOLVERS[solver](context.hessian_op(HessianMode.GAUSS_NEWTON_MISFIT), prior.R_op, prior.Rinv_op, cfg)
        logger.info(f"Window ({t0:g}, {t1:g}]: {sub.obs_steps.size} times, lambda_1={result.eigenvalues[0]:.4e}")
        spectra.append({"window": (float(t0), float(t1)), "num_times": int(sub.obs_steps.size), "eigenvalues": result.eigenvalues})
    return spectra


def build_velocity(mesh: fem.Mesh, cfg) -> VelocityField:
    if cfg.advdiff.velocity_file:
        return NodalVelocity.from_file(fem.FnSpace(mesh, cfg.advdiff.state_degree), cfg.advdiff.velocity_file)
    return default_velocity(mesh)


def build_problem(cfg) -> ProblemBundle:
    """Mesh with buildings, velocity, model, prior and synthetic data for an advdiff run config."""
    ad, obs = cfg.advdiff, cfg.observations
    mesh = fem.build_unit_square_mesh(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.holes)
    velocity = build_velocity(mesh, cfg)
    points = random_points_outside_holes(obs.count, mesh.holes, obs.margin, cfg.seeds.obs_points, obs.window)
    model = AdvDiffModel(
        mesh,
        velocity,
        points,
        cfg.observation_times(),
        kappa=ad.kappa,
        t_final=ad.t_final,
        num_steps=ad.num_steps,
        noise_variance=obs.variance,
        gls=ad.gls,
        state_degree=ad.state_degree,
    )
    Theta = fem.anisotropic_tensor(cfg.prior.alpha, cfg.prior.theta1, cfg.prior.theta2) if cfg.prior.anisotropic else None
    prior = BiLaplacianPrior(
        model.param_space,
        cfg.prior.gamma,
        cfg.prior.delta,
        Theta,
        robin_constant=cfg.prior.robin_constant,
        mean=np.full(model.param_space.n, cfg.prior.mean),
        solver=cfg.prior.solver,
    )
    m_true = fem.interpolate(model.param_space, default_truth(ad.truth_center))
    if model.num_observations:
        model.data = synthetic_data(model, m_true, np.sqrt(obs.variance), cfg.seeds.noise)
    logger.info(f"AdvDiff problem: {mesh.num_triangles} triangles, {model.param_space.n} parameters, {model.obs_steps.size} times x {points.shape[0]} points")
    return ProblemBundle(
        name="advdiff",
        model=model,
        prior=prior,
        m_true=m_true,
        m0=prior.mean.copy(),
        observation_points=points,
        obs_window=None,
        extras={"velocity": velocity, "windows": list(ad.windows)},
    )


def run_experiment(cfg, output_dir: Optional[str] = None):
    """Data, MAP, window spectra, variances and samples for the advdiff problem; returns the run summary."""
    bundle = build_problem(cfg)
    runner = ExperimentRunner(bundle, cfg, output_dir)
    summary = runner.run()
    if summary.get("complete"):
        runner.write_spectra(compute_window_spectra(bundle.model, bundle.prior, bundle.extras["windows"], cfg.ghep_config(), cfg.ghep.solver))
    return summary
