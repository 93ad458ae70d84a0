"""
Property checks for the numerical substrate, run by ``main verify``.

Each check reduces to one non-negative error value compared against a
tolerance; counter checks report the number of mismatched counts.
"""

import logging
from typing import Callable, List

import numpy as np
from pydantic import BaseModel, Field

from numerics import fem
from numerics.linalg import LinalgError, LinearOp, cg_solve, dense_cholesky, dense_eigh, dense_qr
from numerics.randeig import GHEPConfig, double_pass, single_pass, solve_dense_ghep

logger = logging.getLogger(__name__)


class PropertyCheck(BaseModel):
    suite: str
    name: str
    value: float = Field(description="Error measure; inf when the check raised")
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tolerance

    def to_text(self) -> str:
        status = "ok" if self.passed else "FAIL"
        line = f"  [{self.suite}] {self.name}: {self.value:.3e} (tol {self.tolerance:g}) {status}"
        return f"{line} {self.detail}" if self.detail else line


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _spd(n: int, seed: int) -> np.ndarray:
    X = np.random.default_rng(seed).standard_normal((n, n))
    return X @ X.T / n + np.eye(n)


def _geometric_ghep(n: int = 40, seed: int = 0, ratio: float = 0.5):
    rng = np.random.default_rng(seed)
    B = _spd(n, seed + 100)
    L = np.linalg.cholesky(B)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    A = L @ (U * ratio ** np.arange(n)) @ U.T @ L.T
    return 0.5 * (A + A.T), B


def _ghep_ops(A, B):
    return (
        LinearOp.from_matrix(A, symmetric=True, name="A"),
        LinearOp.from_matrix(B, symmetric=True, name="B"),
        LinearOp(B.shape[0], lambda x: np.linalg.solve(B, x), symmetric=True, name="B_solve"),
    )


def linalg_checks(seed: int = 0) -> List[PropertyCheck]:
    A = _spd(30, seed)
    b = np.random.default_rng(seed + 1).standard_normal(30)
    checks = []

    result = cg_solve(LinearOp.from_matrix(A, symmetric=True), b, rtol=1e-12)
    err = _rel(result.x, np.linalg.solve(A, b)) if result.converged else float("inf")
    checks.append(PropertyCheck(suite="linalg", name="cg vs dense solve", value=err, tolerance=1e-8, detail=f"({result.iterations} iterations)"))

    L = dense_cholesky(A)
    checks.append(PropertyCheck(suite="linalg", name="cholesky recomposition", value=_rel(L @ L.T, A), tolerance=1e-12))

    Y = np.random.default_rng(seed + 2).standard_normal((30, 8))
    Q, R = dense_qr(Y)
    qr_err = max(_rel(Q @ R, Y), float(np.linalg.norm(Q.T @ Q - np.eye(8))))
    checks.append(PropertyCheck(suite="linalg", name="qr recomposition", value=qr_err, tolerance=1e-12))

    values, vectors = dense_eigh(A)
    checks.append(PropertyCheck(suite="linalg", name="eigh recomposition", value=_rel((vectors * values) @ vectors.T, A), tolerance=1e-12))
    return checks


def randeig_checks(seed: int = 0) -> List[PropertyCheck]:
    A, B = _geometric_ghep(seed=seed)
    cfg = GHEPConfig(r=10, l=20, seed=seed)
    k = cfg.r + cfg.l
    checks = []

    A_op, B_op, B_solve = _ghep_ops(A, B)
    double = double_pass(A_op, B_op, B_solve, cfg)
    exact, _ = solve_dense_ghep(A, B)
    accuracy = float(np.max(np.abs(double.eigenvalues - exact[: cfg.r]) / exact[: cfg.r]))
    checks.append(PropertyCheck(suite="randeig", name="double pass vs dense oracle", value=accuracy, tolerance=1e-6))

    V = double.vectors
    checks.append(PropertyCheck(suite="randeig", name="B-orthonormal eigenvectors", value=float(np.linalg.norm(V.T @ B @ V - np.eye(cfg.r))), tolerance=1e-8))

    single = single_pass(*_ghep_ops(A, B), cfg)
    expected = {
        ("double_pass", "A_applies"): 2 * k,
        ("double_pass", "B_solves"): k,
        ("single_pass", "A_applies"): k,
        ("single_pass", "B_solves"): k,
    }
    observed = {
        ("double_pass", "A_applies"): double.counters["A_applies"],
        ("double_pass", "B_solves"): double.counters["B_solves"],
        ("single_pass", "A_applies"): single.counters["A_applies"],
        ("single_pass", "B_solves"): single.counters["B_solves"],
    }
    wrong = [f"{m}.{c}={observed[(m, c)]} (want {v})" for (m, c), v in expected.items() if observed[(m, c)] != v]
    checks.append(PropertyCheck(suite="randeig", name="operator apply counts", value=float(len(wrong)), tolerance=0.0, detail="; ".join(wrong)))
    return checks


def _mesh_arrays(mesh: fem.Mesh):
    return (mesh.vertices, mesh.triangles, mesh.boundary_edges, mesh.boundary_tags, mesh.boundary_hole_ids)


def fem_checks(nx: int = 8, seed: int = 0) -> List[PropertyCheck]:
    mesh = fem.build_unit_square_mesh(nx, nx)
    points = 0.05 + 0.9 * np.random.default_rng(seed).random((25, 2))
    checks = []

    for degree in (1, 2):
        space = fem.FnSpace(mesh, degree)
        area = abs(float(fem.assemble_mass(space).sum()) - 1.0)
        checks.append(PropertyCheck(suite="fem", name=f"P{degree} mass integrates the unit area", value=area, tolerance=1e-12))
        rows = np.asarray(fem.point_observation(space, points).sum(axis=1)).ravel()
        checks.append(PropertyCheck(suite="fem", name=f"P{degree} partition of unity", value=float(np.abs(rows - 1.0).max()), tolerance=1e-12))

    holes = [(0.25, 0.25, 0.5, 0.5)]
    first, second = fem.build_unit_square_mesh(nx, nx, holes), fem.build_unit_square_mesh(nx, nx, holes)
    same = all(np.array_equal(a, b) for a, b in zip(_mesh_arrays(first), _mesh_arrays(second)))
    p2a, p2b = fem.FnSpace(first, 2), fem.FnSpace(second, 2)
    same = same and np.array_equal(p2a.cell_dofs, p2b.cell_dofs) and np.array_equal(p2a.dof_coords, p2b.dof_coords)
    checks.append(PropertyCheck(suite="fem", name="deterministic mesh and dof numbering", value=0.0 if same else 1.0, tolerance=0.0))

    space = fem.FnSpace(mesh, 1)
    coeffs = fem.EllipticCoefficients(0.1, 0.5, fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5), 0.3)
    forms = {
        "mass": (fem.assemble_mass(space), fem.rect_factor(space, "mass")),
        "elliptic": (
            fem.assemble_elliptic(space, coeffs.gamma, coeffs.Theta, coeffs.delta, coeffs.robin_beta),
            fem.rect_factor(space, coeffs),
        ),
    }
    for form, (A, factor) in forms.items():
        err = _rel(factor.product().toarray(), A.toarray())
        checks.append(PropertyCheck(suite="fem", name=f"rectangular factor of the {form} form", value=err, tolerance=1e-12))
    return checks


SUITES: List[Callable[..., List[PropertyCheck]]] = [linalg_checks, randeig_checks, fem_checks]


def run_property_checks(nx: int = 8) -> List[PropertyCheck]:
    """Run every suite; a suite that raises is reported as one failed check."""
    checks = []
    for suite in SUITES:
        name = suite.__name__.replace("_checks", "")
        try:
            checks.extend(suite(nx=nx) if suite is fem_checks else suite())
        except (LinalgError, fem.FemError, fem.MeshError, ValueError) as e:
            logger.error(f"Property suite {name} raised: {e}", exc_info=True)
            checks.append(PropertyCheck(suite=name, name="suite raised", value=float("inf"), tolerance=0.0, detail=str(e)))
    failed = [c for c in checks if not c.passed]
    logger.info(f"Property checks: {len(checks) - len(failed)}/{len(checks)} passed")
    return checks
