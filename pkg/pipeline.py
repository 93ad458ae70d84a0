"""
Main workflow for the inverse-problem flow.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from config import ConfigError, RunConfig, load_run_config
from inference.model import CorruptedAdjointModel, verify_model
from inference.prior import BiLaplacianPrior
from numerics import fem
from numerics.checks import run_property_checks
from numerics.linalg import LinalgError
from problems import advdiff, poisson
from stages import STAGE_DEPENDENCIES, STAGE_ORDER, ExperimentRunner, StageError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_ACCEPTANCE = 3

PROBLEMS = {"poisson": poisson, "advdiff": advdiff}


def _failure(error: Exception, message: str, exit_code: int) -> dict:
    return {
        "success": False,
        "error": str(error),
        "message": message,
        "exit_code": exit_code,
    }


def _error_result(error: Exception, output_dir: str, setup_message: str = "Problem setup failed") -> dict:
    """Map a failure raised while building or running a problem to its exit code."""
    if isinstance(error, StageError):
        return _failure(error, f"Run stopped in stage '{error.stage}'; partial artifacts in {output_dir}", EXIT_SOLVER)
    if isinstance(error, (fem.MeshError, fem.FemError, ValueError)):
        logger.error(f"Problem setup failed: {error}", exc_info=True)
        return _failure(error, setup_message, EXIT_VALIDATION)
    if isinstance(error, (LinalgError, ArithmeticError)):
        logger.error(f"Solver failure: {error}", exc_info=True)
        return _failure(error, "Solver failure", EXIT_SOLVER)
    logger.error(f"Unexpected failure: {error}", exc_info=True)
    return _failure(error, "Error occurred during workflow execution", EXIT_SOLVER)


class InversionPipeline:
    """Orchestrates config loading, problem setup and the run stages."""

    def __init__(self, config_path: str, output_dir: Optional[str] = None):
        self.config_path = config_path
        self.output_dir = output_dir
        self.cfg: Optional[RunConfig] = None

    def load(self) -> RunConfig:
        if self.cfg is None:
            self.cfg = load_run_config(self.config_path)
            if self.output_dir:
                self.cfg.output.directory = self.output_dir
        return self.cfg

    def plan(self) -> dict:
        """Validate the config and describe the stages without solving anything."""
        try:
            cfg = self.load()
        except ConfigError as e:
            return _failure(e, f"Invalid config {self.config_path}", EXIT_VALIDATION)
        stages = [s for s in STAGE_ORDER if getattr(cfg.stages, s)]
        plan = {
            "problem": cfg.problem,
            "mesh": f"{cfg.mesh.nx}x{cfg.mesh.ny}" + (f" with {len(cfg.mesh.holes)} holes" if cfg.mesh.holes else ""),
            "stages": stages,
            "observations": cfg.observations.count,
            "ghep": {"r": cfg.ghep.r, "l": cfg.ghep.l, "solver": cfg.ghep.solver},
            "output_dir": cfg.output_dir(),
        }
        return {"success": True, "result": plan, "message": "Config is valid", "exit_code": EXIT_OK}

    def run_workflow(self) -> dict:
        """
        Execute every enabled stage of the configured experiment.

        Returns:
            dict: success flag, run summary, message and exit code
        """
        try:
            cfg = self.load()
        except ConfigError as e:
            logger.error(f"Config error: {e}")
            return _failure(e, f"Invalid config {self.config_path}", EXIT_VALIDATION)

        try:
            summary = PROBLEMS[cfg.problem].run_experiment(cfg, cfg.output_dir())
        except Exception as e:
            return _error_result(e, cfg.output_dir())

        map_stage = summary.get("stages", {}).get("map")
        if map_stage is not None and not map_stage["converged"]:
            return {
                "success": False,
                "result": summary,
                "error": f"MAP solve stopped: {map_stage['reason']}",
                "message": "Run finished but the MAP point failed its convergence check",
                "exit_code": EXIT_ACCEPTANCE,
            }

        return {
            "success": True,
            "result": summary,
            "message": f"{cfg.problem} run completed; artifacts in {cfg.output_dir()}",
            "exit_code": EXIT_OK,
        }

    def run_individual_stage(self, stage_name: str) -> dict:
        """Run one stage together with the stages it depends on."""
        if stage_name not in STAGE_ORDER:
            return {
                "success": False,
                "error": f"Invalid stage name: {stage_name}",
                "message": f"Valid stage names are: {', '.join(STAGE_ORDER)}",
                "exit_code": EXIT_VALIDATION,
            }
        try:
            cfg = self.load()
        except ConfigError as e:
            return _failure(e, f"Invalid config {self.config_path}", EXIT_VALIDATION)

        needed = {stage_name, *STAGE_DEPENDENCIES.get(stage_name, ())}
        stages = cfg.stages.model_copy(update={s: s in needed for s in STAGE_ORDER})
        cfg = cfg.model_copy(update={"stages": stages})
        try:
            runner = ExperimentRunner(PROBLEMS[cfg.problem].build_problem(cfg), cfg, cfg.output_dir())
            summary = runner.run()
        except Exception as e:
            return _error_result(e, cfg.output_dir())
        return {"success": True, "result": summary, "message": f"Stage '{stage_name}' completed successfully", "exit_code": EXIT_OK}

    def run_spectrum(self, windows: Sequence[Tuple[float, float]]) -> dict:
        """Misfit-Hessian spectra for each observation window, one CSV each."""
        if not windows:
            return _failure(ValueError("empty window list"), "At least one observation window is required", EXIT_VALIDATION)
        try:
            cfg = self.load()
        except ConfigError as e:
            return _failure(e, f"Invalid config {self.config_path}", EXIT_VALIDATION)
        if cfg.problem != "advdiff":
            return _failure(ValueError(f"problem is {cfg.problem}"), "Spectra by observation window need an advdiff config", EXIT_VALIDATION)
        try:
            bundle = advdiff.build_problem(cfg)
            spectra = advdiff.compute_window_spectra(bundle.model, bundle.prior, list(windows), cfg.ghep_config(), cfg.ghep.solver)
        except Exception as e:
            return _error_result(e, cfg.output_dir(), setup_message="Invalid observation window or problem setup")
        files = ExperimentRunner(bundle, cfg, cfg.output_dir()).write_spectra(spectra)
        return {"success": True, "result": {"files": files, "spectra": spectra}, "message": f"Wrote {len(files)} spectra", "exit_code": EXIT_OK}


def _verification_problems(nx: int = 8):
    """Small instances of both model problems away from their data."""
    rng = np.random.default_rng(0)
    mesh = fem.build_unit_square_mesh(nx, nx)
    points = poisson.random_points(10, (0.1, 0.1, 0.9, 0.9), seed=1)
    pm = poisson.PoissonModel(mesh, points, noise_std=0.05)
    pm.data = rng.standard_normal(pm.num_observations) * 0.1 + points[:, 1]
    p_prior = poisson.build_prior(pm.param_space, RunConfig(problem="poisson").prior)
    p_m0 = 0.3 * rng.standard_normal(pm.param_space.n)

    amesh = fem.build_unit_square_mesh(nx, nx, [(0.25, 0.25, 0.5, 0.5)])
    am = advdiff.AdvDiffModel(
        amesh,
        advdiff.default_velocity(amesh),
        advdiff.random_points_outside_holes(8, amesh.holes, 0.05, seed=2),
        [0.5, 1.0],
        kappa=0.01,
        t_final=1.0,
        num_steps=8,
        noise_variance=1e-2,
    )
    am.data = 0.1 * rng.standard_normal(am.data.shape)
    a_prior = BiLaplacianPrior(am.param_space, 1.0, 8.0)
    a_m0 = rng.standard_normal(am.param_space.n)
    return [("poisson", pm, p_prior, p_m0), ("advdiff", am, a_prior, a_m0)]


def adjoint_transpose_error(model: "advdiff.AdvDiffModel", seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    m = rng.standard_normal(model.param_space.n)
    w = rng.standard_normal(model.num_observations)
    lhs = float(model.apply_p2o(m) @ w)
    rhs = float(m @ model.apply_p2o_adjoint(w))
    return abs(lhs - rhs) / max(abs(lhs), 1e-300)


def run_verification(inject_adjoint_bug: bool = False, nx: int = 8) -> dict:
    """Finite-difference checks of both model problems plus the numerics property suites."""
    reports = []
    extra_failures = []
    for name, model, prior, m0 in _verification_problems(nx):
        if inject_adjoint_bug:
            model = CorruptedAdjointModel(model)
        reports.append(verify_model(model, prior, m0, name=name))
        if name == "advdiff":
            err = adjoint_transpose_error(model)
            if err >= 1e-10:
                extra_failures.append(f"advdiff adjoint-transpose identity error {err:.3e}")

    checks = run_property_checks(nx)
    extra_failures.extend(f"[{c.suite}] {c.name}: {c.value:.3e} exceeds {c.tolerance:g}" for c in checks if not c.passed)

    passed = all(r.passed for r in reports) and not extra_failures
    lines = [r.to_text() for r in reports]
    lines.append("property checks:")
    lines.extend(c.to_text() for c in checks)
    lines.extend(f"failure: {f}" for f in extra_failures)
    return {
        "success": passed,
        "result": {"reports": reports, "checks": checks, "failures": extra_failures},
        "message": "\n".join(lines),
        "exit_code": EXIT_OK if passed else EXIT_ACCEPTANCE,
    }
