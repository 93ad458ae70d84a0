"""
Stage definitions for an inversion run.

A run walks sample_prior -> map -> eigens -> variance -> sample_posterior
(each switchable in the config), writing artifacts as it goes. A failing
stage still leaves a MANIFEST behind, marked incomplete.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from inference import newtoncg
from inference import posterior as laplace
from inference.model import InverseModel, SolveContext
from inference.prior import BiLaplacianPrior
from numerics import fem
from utils import save_results, write_csv, write_field, write_manifest, write_mesh

logger = logging.getLogger(__name__)

STAGE_ORDER = ("sample_prior", "map", "eigens", "variance", "sample_posterior")
STAGE_DEPENDENCIES = {
    "eigens": ("map",),
    "variance": ("map", "eigens"),
    "sample_posterior": ("map", "eigens"),
}


class StageError(Exception):
    """A run stage failed; artifacts written before it are kept."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")


@dataclass
class ProblemBundle:
    name: str
    model: InverseModel
    prior: BiLaplacianPrior
    m_true: np.ndarray
    m0: np.ndarray
    observation_points: np.ndarray
    obs_window: Optional[tuple] = None
    extras: dict = field(default_factory=dict)

    @property
    def param_space(self) -> fem.FnSpace:
        return self.model.param_space


def window_mask(coords: np.ndarray, window) -> np.ndarray:
    x0, y0, x1, y1 = window
    return (coords[:, 0] >= x0) & (coords[:, 0] <= x1) & (coords[:, 1] >= y0) & (coords[:, 1] <= y1)


class ExperimentRunner:
    """Runs the enabled stages of one config against one problem bundle."""

    def __init__(self, bundle: ProblemBundle, cfg, output_dir: Optional[str] = None):
        self.bundle = bundle
        self.cfg = cfg
        self.output_dir = output_dir or cfg.output_dir()
        self.context = SolveContext(bundle.model, bundle.prior)
        self.artifacts: List[str] = []
        self.timings = {}
        self.summary = {"problem": bundle.name, "stages": {}}
        self.m_map: Optional[np.ndarray] = None
        self.posterior: Optional[laplace.LaplacePosterior] = None
        self.prior_variance: Optional[np.ndarray] = None

    def plan(self) -> List[str]:
        return [s for s in STAGE_ORDER if getattr(self.cfg.stages, s)]

    def _path(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.output_dir, name)

    def _write_field(self, name: str, values: np.ndarray):
        write_field(self._path(name), self.bundle.param_space.dof_coords, values)

    def _write_inputs(self):
        b = self.bundle
        write_mesh(self._path("mesh.txt"), b.model.mesh)
        self._write_field("m_true.txt", b.m_true)
        write_csv(self._path("observation_points.csv"), ["x", "y"], b.observation_points.tolist())
        data = np.asarray(b.model.data).ravel()
        write_csv(self._path("data.csv"), ["index", "value"], ((i, float(v)) for i, v in enumerate(data)))

    def run(self) -> dict:
        os.makedirs(self.output_dir, exist_ok=True)
        stages = self.plan()
        logger.info(f"Running {self.bundle.name} stages {stages} into {self.output_dir}")
        self._write_inputs()
        stage = "setup"
        try:
            for stage in stages:
                start = time.perf_counter()
                logger.info(f"Stage {stage} started")
                getattr(self, f"stage_{stage}")()
                self.timings[stage] = time.perf_counter() - start
                logger.info(f"Stage {stage} finished in {self.timings[stage]:.2f} s")
        except Exception as e:
            logger.error(f"Stage {stage} failed: {e}", exc_info=True)
            self.summary["failed_stage"] = stage
            self._finish(complete=False)
            if isinstance(e, StageError):
                raise
            raise StageError(stage, str(e)) from e
        return self._finish(complete=True)

    def _finish(self, complete: bool) -> dict:
        self.summary["complete"] = complete
        self.summary["timings"] = self.timings
        self.summary["counters"] = dict(self.bundle.model.counters)
        self.summary["counters"]["hessian_applies"] = self.context.hessian_applies
        save_results(self.summary, self._path("summary.json"))
        write_manifest(self.output_dir, self.artifacts, complete)
        return self.summary

    def _current_point(self) -> np.ndarray:
        if self.m_map is None:
            logger.warning("MAP stage disabled; using the initial guess as expansion point")
            self.m_map = self.bundle.m0.copy()
        return self.m_map

    def _current_posterior(self, stage: str) -> laplace.LaplacePosterior:
        if self.posterior is None:
            raise StageError(stage, "posterior requires the eigens stage")
        return self.posterior

    def stage_sample_prior(self):
        cfg = self.cfg
        samples = self.bundle.prior.sample_batch(cfg.seeds.prior, cfg.stages.num_samples)
        for i in range(samples.shape[1]):
            self._write_field(f"prior_sample_{i}.txt", samples[:, i])
        self.summary["stages"]["sample_prior"] = {"count": samples.shape[1]}

    def stage_map(self):
        b = self.bundle
        m, trace = newtoncg.solve(b.model, b.prior, b.m0, self.cfg.newton_config(), context=self.context)
        self.m_map = m
        self._write_field("m_map.txt", m)
        trace.write_csv(self._path("newton_trace.csv"))
        cost = self.context.cost(m)
        space = b.param_space
        truth_norm = fem.l2_norm(space, b.m_true)
        self.summary["stages"]["map"] = {
            "converged": trace.converged,
            "reason": trace.reason,
            "newton_iterations": trace.num_iterations,
            "cg_iterations": trace.total_cg_iterations,
            "cost": cost.total,
            "misfit": cost.misfit,
            "reg": cost.reg,
            "relative_l2_error": fem.l2_norm(space, m - b.m_true) / truth_norm if truth_norm > 0 else None,
        }

    def stage_eigens(self):
        b, cfg = self.bundle, self.cfg
        post = laplace.build(
            b.model,
            b.prior,
            self._current_point(),
            cfg.ghep_config(),
            solver=cfg.ghep.solver,
            mode=cfg.ghep.mode,
            lambda_cut=cfg.ghep.lambda_cut,
            context=self.context,
        )
        self.posterior = post
        values = post.ghep.eigenvalues if post.ghep is not None else np.zeros(0)
        rows = [(i, float(v), int(v > post.lambda_cut)) for i, v in enumerate(values)]
        write_csv(self._path("eigenvalues.csv"), ["index", "eigenvalue", "kept"], rows)
        self.summary["stages"]["eigens"] = {
            "computed": int(values.size),
            "kept": post.rank,
            "above_one": int(np.sum(values > 1.0)),
            "num_observations": b.model.num_observations,
            "counters": post.counters,
            "max_eigen_residual": float(post.eigen_residuals.max()) if post.eigen_residuals is not None and post.eigen_residuals.size else None,
        }

    def stage_variance(self):
        b, cfg = self.bundle, self.cfg
        post = self._current_posterior("variance")
        var = cfg.variance
        prior_var = b.prior.pointwise_variance(var.method, var.rank, var.num_probes, cfg.seeds.variance, cfg.threads)
        post_var = prior_var - post.correction_field()
        self.prior_variance = prior_var
        self._write_field("prior_variance.txt", prior_var)
        self._write_field("posterior_variance.txt", post_var)
        reduction = prior_var - post_var
        stats = {
            "method": var.method,
            "mean_prior_variance": float(prior_var.mean()),
            "mean_posterior_variance": float(post_var.mean()),
            "fraction_reduced": float(np.mean(post_var <= prior_var)),
        }
        if b.obs_window is not None:
            inside = window_mask(b.param_space.dof_coords, b.obs_window)
            if inside.any() and (~inside).any():
                stats["mean_reduction_inside"] = float(reduction[inside].mean())
                stats["mean_reduction_outside"] = float(reduction[~inside].mean())
                stats["posterior_prior_ratio_inside"] = float(post_var[inside].mean() / prior_var[inside].mean())
        self.summary["stages"]["variance"] = stats

    def stage_sample_posterior(self):
        cfg = self.cfg
        post = self._current_posterior("sample_posterior")
        for i in range(cfg.stages.num_samples):
            self._write_field(f"posterior_sample_{i}.txt", post.sample(cfg.seeds.posterior + i))
        self.summary["stages"]["sample_posterior"] = {"count": cfg.stages.num_samples, "rank": post.rank}

    def write_spectra(self, spectra) -> List[str]:
        """One CSV per observation window; the MANIFEST is rewritten to include them."""
        os.makedirs(self.output_dir, exist_ok=True)
        names = []
        for entry in spectra:
            t0, t1 = entry["window"]
            name = f"spectrum_{t0:g}_{t1:g}.csv"
            write_csv(self._path(name), ["index", "eigenvalue"], enumerate(entry["eigenvalues"].tolist()))
            names.append(name)
        self.summary["stages"]["spectrum"] = {
            f"{s['window'][0]:g}_{s['window'][1]:g}": {"num_times": s["num_times"], "lambda_1": float(s["eigenvalues"][0])} for s in spectra
        }
        self._finish(complete=self.summary.get("complete", True))
        return names
