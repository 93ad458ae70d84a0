"""
Configuration settings for the inverse-problem flow.

Environment settings come from `.env` / the process environment; experiment
settings come from YAML run configs validated by the pydantic models below.
"""

import logging
import math
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from inference.model import HessianMode
from inference.newtoncg import NewtonConfig
from numerics.randeig import SOLVERS, GHEPConfig

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Process-wide settings for the inverse-problem flow."""

    OUTPUT_ROOT = os.getenv("INVERSE_FLOW_OUTPUT_ROOT", "outputs")
    LOG_LEVEL = os.getenv("INVERSE_FLOW_LOG_LEVEL", "INFO")
    THREADS = int(os.getenv("INVERSE_FLOW_THREADS", "1") or 1)

    @classmethod
    def validate_config(cls):
        """Validate configuration and return status."""
        problems = []
        if cls.THREADS < 1:
            problems.append(f"INVERSE_FLOW_THREADS must be >= 1, got {cls.THREADS}")
        if logging.getLevelName(cls.LOG_LEVEL.upper()) == f"Level {cls.LOG_LEVEL.upper()}":
            problems.append(f"Unknown log level {cls.LOG_LEVEL!r}")
        root = os.path.abspath(cls.OUTPUT_ROOT)
        parent = os.path.dirname(root)
        if os.path.exists(root) and not os.path.isdir(root):
            problems.append(f"Output root {root} exists and is not a directory")
        elif not os.path.exists(root) and not os.access(parent, os.W_OK):
            problems.append(f"Output root parent {parent} is not writable")
        if problems:
            return {"valid": False, "message": "; ".join(problems)}
        return {"valid": True, "message": f"Configuration is valid (output root {root})."}

    @classmethod
    def configure_logging(cls, level: Optional[str] = None):
        logging.basicConfig(
            level=(level or cls.LOG_LEVEL).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )


class ConfigError(Exception):
    """Run-config error; messages start with the offending line when known."""

    def __init__(self, message: str, line: Optional[int] = None, path: str = ""):
        self.line = line
        self.path = path
        prefix = f"line {line}: " if line is not None else ""
        where = f"{path}: " if path else ""
        super().__init__(f"{prefix}{where}{message}")


Rectangle = Tuple[float, float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MeshSection(_Section):
    nx: int = Field(default=16, ge=1, description="Cells along x")
    ny: int = Field(default=16, ge=1, description="Cells along y")
    holes: List[Rectangle] = Field(default_factory=list, description="Rectangular holes (x0, y0, x1, y1)")


class PriorSection(_Section):
    gamma: float = Field(default=0.1, gt=0.0, description="Diffusion coefficient of the prior operator")
    delta: float = Field(default=0.5, gt=0.0, description="Reaction coefficient of the prior operator")
    anisotropic: bool = Field(default=True, description="Use the rotated tensor instead of the identity")
    alpha: float = Field(default=math.pi / 4, description="Rotation angle of the tensor")
    theta1: float = Field(default=2.0, gt=0.0, description="First principal value of the tensor")
    theta2: float = Field(default=0.5, gt=0.0, description="Second principal value of the tensor")
    robin_constant: float = Field(default=1.42, gt=0.0, description="Robin coefficient is sqrt(gamma*delta)/robin_constant")
    mean: float = Field(default=0.0, description="Constant prior mean")
    solver: Literal["direct", "pcg"] = Field(default="direct", description="Sparse solver for prior operators")


class ObservationSection(_Section):
    count: int = Field(default=50, ge=0, description="Number of observation points")
    window: Rectangle = Field(default=(0.1, 0.1, 0.9, 0.5), description="Rectangle the points are drawn from")
    noise_std: Optional[float] = Field(default=0.01, gt=0.0, description="Noise standard deviation")
    noise_variance: Optional[float] = Field(default=None, gt=0.0, description="Noise variance; overrides noise_std")
    t_start: float = Field(default=1.2, gt=0.0, description="First observation time")
    t_end: Optional[float] = Field(default=None, gt=0.0, description="Last observation time (final time if unset)")
    t_step: float = Field(default=0.2, gt=0.0, description="Spacing of observation times")
    margin: float = Field(default=0.05, ge=0.0, description="Distance kept from holes and outer walls")

    @field_validator("window")
    @classmethod
    def _window_ordered(cls, v):
        x0, y0, x1, y1 = v
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"window {list(v)} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")
        return v

    @model_validator(mode="after")
    def _noise_given(self):
        if self.noise_std is None and self.noise_variance is None:
            raise ValueError("one of noise_std or noise_variance is required")
        return self

    @property
    def variance(self) -> float:
        if self.noise_variance is not None:
            return self.noise_variance
        return float(self.noise_std) ** 2


class PoissonSection(_Section):
    state_degree: int = Field(default=2, ge=1, le=2, description="Polynomial degree of the state")
    truth_center: Tuple[float, float] = Field(default=(0.5, 0.3), description="Center of the true log-coefficient bump")


class AdvDiffSection(_Section):
    kappa: float = Field(default=1e-3, gt=0.0, description="Diffusivity")
    t_final: float = Field(default=4.0, gt=0.0, description="Final time")
    num_steps: int = Field(default=40, ge=1, description="Implicit Euler steps")
    gls: bool = Field(default=True, description="Galerkin least-squares stabilization")
    state_degree: int = Field(default=1, ge=1, le=2, description="Polynomial degree of the state")
    velocity_file: Optional[str] = Field(default=None, description="Field file with nodal (vx, vy) columns")
    truth_center: Tuple[float, float] = Field(default=(0.35, 0.7), description="Center of the true initial plume")
    windows: List[Tuple[float, float]] = Field(default_factory=lambda: [(1.0, 4.0), (2.0, 4.0), (3.0, 4.0)], description="Observation windows for spectra")

    @property
    def dt(self) -> float:
        return self.t_final / self.num_steps


class NewtonSection(NewtonConfig):
    model_config = ConfigDict(extra="forbid")


class GHEPSection(_Section):
    r: int = Field(default=50, ge=1, description="Eigenpairs computed")
    l: int = Field(default=20, ge=0, description="Oversampling")
    solver: str = Field(default="double", description="Randomized eigensolver")
    lambda_cut: float = Field(default=0.07, ge=0.0, description="Eigenvalues at or below this are dropped")
    mode: HessianMode = Field(default=HessianMode.GAUSS_NEWTON_MISFIT, description="Misfit Hessian used for the eigenproblem")

    @field_validator("solver")
    @classmethod
    def _known_solver(cls, v):
        if v not in SOLVERS:
            raise ValueError(f"solver must be one of {sorted(SOLVERS)}")
        return v

    @field_validator("mode")
    @classmethod
    def _misfit_mode(cls, v):
        if HessianMode(v).includes_prior:
            raise ValueError("mode must be 'misfit_only' or 'gauss_newton_misfit'")
        return v


class VarianceSection(_Section):
    method: Literal["randomized", "stochastic", "exact"] = Field(default="randomized", description="Prior variance estimator")
    rank: int = Field(default=100, ge=1, description="Eigenpairs for the randomized estimator")
    num_probes: int = Field(default=50, ge=1, description="Probes for the stochastic estimator")


class SeedsSection(_Section):
    prior: int = Field(default=1, ge=0)
    noise: int = Field(default=2, ge=0)
    eigensolver: int = Field(default=3, ge=0)
    obs_points: int = Field(default=4, ge=0)
    posterior: int = Field(default=5, ge=0)
    variance: int = Field(default=6, ge=0)


class StagesSection(_Section):
    sample_prior: bool = True
    map: bool = True
    eigens: bool = True
    variance: bool = True
    sample_posterior: bool = True
    num_samples: int = Field(default=3, ge=1, description="Samples written per sampling stage")

    @model_validator(mode="after")
    def _posterior_needs_eigens(self):
        dependent = [s for s in ("variance", "sample_posterior") if getattr(self, s)]
        if dependent and not self.eigens:
            raise ValueError(f"stages {dependent} need the eigens stage")
        return self


class OutputSection(_Section):
    directory: Optional[str] = Field(default=None, description="Artifact directory (default: <output root>/<name>)")


PROBLEM_DEFAULTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "poisson": {
        "mesh": {"nx": 16, "ny": 16},
        "prior": {"gamma": 0.1, "delta": 0.5, "anisotropic": True, "alpha": math.pi / 4, "theta1": 2.0, "theta2": 0.5},
        "observations": {"count": 50, "window": (0.1, 0.1, 0.9, 0.5), "noise_std": 0.01},
        "ghep": {"r": 50, "l": 20},
    },
    "advdiff": {
        "mesh": {"nx": 24, "ny": 24, "holes": [(0.25, 0.125, 0.5, 0.375), (0.625, 0.625, 0.75, 0.875)]},
        "prior": {"gamma": 1.0, "delta": 8.0, "anisotropic": False},
        "observations": {"count": 80, "window": (0.0, 0.0, 1.0, 1.0), "noise_variance": 2.45e-7, "noise_std": None},
        "ghep": {"r": 50, "l": 10},
        "newton": {"eta_max": 1e-8, "cg_max_iter": 400},
    },
}


class RunConfig(_Section):
    """One experiment: problem choice plus every setting that affects its artifacts."""

    problem: Literal["poisson", "advdiff"]
    name: Optional[str] = Field(default=None, description="Run name; defaults to the problem name")
    threads: int = Field(default_factory=lambda: Config.THREADS, ge=1, description="Worker threads for eigensolver applies")
    mesh: MeshSection = Field(default_factory=MeshSection)
    prior: PriorSection = Field(default_factory=PriorSection)
    observations: ObservationSection = Field(default_factory=ObservationSection)
    poisson: PoissonSection = Field(default_factory=PoissonSection)
    advdiff: AdvDiffSection = Field(default_factory=AdvDiffSection)
    newton: NewtonSection = Field(default_factory=NewtonSection)
    ghep: GHEPSection = Field(default_factory=GHEPSection)
    variance: VarianceSection = Field(default_factory=VarianceSection)
    seeds: SeedsSection = Field(default_factory=SeedsSection)
    stages: StagesSection = Field(default_factory=StagesSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="before")
    @classmethod
    def _problem_defaults(cls, data):
        if not isinstance(data, dict) or data.get("problem") not in PROBLEM_DEFAULTS:
            return data
        merged = dict(data)
        for section, defaults in PROBLEM_DEFAULTS[data["problem"]].items():
            given = merged.get(section)
            if given is None:
                merged[section] = dict(defaults)
            elif isinstance(given, dict):
                if section == "observations" and {"noise_std", "noise_variance"} & set(given):
                    defaults = {k: v for k, v in defaults.items() if k not in ("noise_std", "noise_variance")}
                merged[section] = {**defaults, **given}
        return merged

    @model_validator(mode="after")
    def _consistent(self):
        if self.problem == "advdiff":
            ad, obs = self.advdiff, self.observations
            t_end = obs.t_end if obs.t_end is not None else ad.t_final
            if t_end > ad.t_final + 1e-12:
                raise ValueError(f"observations.t_end {t_end} exceeds advdiff.t_final {ad.t_final}")
            if obs.t_start > t_end:
                raise ValueError(f"observations.t_start {obs.t_start} is after t_end {t_end}")
        return self

    @property
    def run_name(self) -> str:
        return self.name or self.problem

    def output_dir(self) -> str:
        return self.output.directory or os.path.join(Config.OUTPUT_ROOT, self.run_name)

    def ghep_config(self, r: Optional[int] = None) -> GHEPConfig:
        return GHEPConfig(r=r or self.ghep.r, l=self.ghep.l, seed=self.seeds.eigensolver, threads=self.threads)

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(**self.newton.model_dump())

    def observation_times(self) -> List[float]:
        obs, ad = self.observations, self.advdiff
        t_end = obs.t_end if obs.t_end is not None else ad.t_final
        count = int(math.floor((t_end - obs.t_start) / obs.t_step + 1e-9)) + 1
        return [obs.t_start + k * obs.t_step for k in range(count)]


def _node_lines(node, path=(), out=None) -> Dict[tuple, int]:
    """Map every key path in a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _node_lines(value, sub, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            out[path + (i,)] = item.start_mark.line + 1
            _node_lines(item, path + (i,), out)
    return out


def _line_for(loc: tuple, lines: Dict[tuple, int]) -> Optional[int]:
    loc = tuple(p for p in loc if not (isinstance(p, str) and p.startswith("function-")))
    for k in range(len(loc), 0, -1):
        if loc[:k] in lines:
            return lines[loc[:k]]
    return None


def parse_run_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML: {getattr(e, 'problem', e)}", line=mark.line + 1 if mark else None) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping of sections", line=1)
    lines = _node_lines(root)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        dotted = ".".join(str(p) for p in loc)
        errors = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        logger.debug(f"Config errors in {source}: {errors}")
        raise ConfigError(first["msg"], line=_line_for(loc, lines), path=dotted) from e


def load_run_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as f:
        return parse_run_config(f.read(), source=path)
