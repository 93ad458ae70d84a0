"""
Finite elements on structured triangular meshes of the unit square.

Meshes may carry rectangular holes (masked grid cells). Spaces are
continuous Lagrange P1/P2. Assembly is vectorized over elements: local
matrices come from einsum contractions at quadrature points and are
scattered through COO into CSR.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

GRID_TOL = 1e-10
LOCATE_TOL = 1e-12
OUTER_TAGS = ("bottom", "top", "left", "right")

ValueFn = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


class MeshError(Exception):
    pass


class FemError(Exception):
    pass


@dataclass
class Mesh:
    """Triangles are counterclockwise; boundary edges keep their triangle orientation."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    boundary_hole_ids: np.ndarray
    holes: tuple = ()
    nx: Optional[int] = None
    ny: Optional[int] = None

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def tags(self) -> set:
        return set(self.boundary_tags.tolist())

    @cached_property
    def areas(self) -> np.ndarray:
        x = self.vertices[self.triangles]
        e1 = x[:, 1] - x[:, 0]
        e2 = x[:, 2] - x[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        x = self.vertices[self.triangles]
        lengths = np.linalg.norm(x - np.roll(x, -1, axis=1), axis=2)
        return lengths.max(axis=1)

    @classmethod
    def from_triangles(cls, vertices, triangles, holes=(), nx=None, ny=None) -> "Mesh":
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        oriented = triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        keys = np.sort(oriented, axis=1)
        _, first, counts = np.unique(keys, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("Edge shared by more than two triangles")
        boundary = oriented[first[counts == 1]]
        tags, hole_ids = _tag_boundary(vertices, boundary, holes)
        mesh = cls(vertices, triangles, boundary, tags, hole_ids, tuple(holes), nx, ny)
        if np.any(mesh.areas <= 0.0):
            raise MeshError(f"Triangle {int(np.argmin(mesh.areas))} has non-positive area")
        return mesh


def _on_hole(p, q, hole) -> bool:
    x0, y0, x1, y1 = hole
    inside = all(x0 - GRID_TOL <= pt[0] <= x1 + GRID_TOL and y0 - GRID_TOL <= pt[1] <= y1 + GRID_TOL for pt in (p, q))
    if not inside:
        return False
    for coord, lo, hi in ((0, x0, x1), (1, y0, y1)):
        for side in (lo, hi):
            if abs(p[coord] - side) < GRID_TOL and abs(q[coord] - side) < GRID_TOL:
                return True
    return False


def _tag_boundary(vertices, edges, holes):
    tags = []
    hole_ids = []
    for a, b in edges:
        p, q = vertices[a], vertices[b]
        hole_id = -1
        if abs(p[1]) < GRID_TOL and abs(q[1]) < GRID_TOL:
            tag = "bottom"
        elif abs(p[1] - 1.0) < GRID_TOL and abs(q[1] - 1.0) < GRID_TOL:
            tag = "top"
        elif abs(p[0]) < GRID_TOL and abs(q[0]) < GRID_TOL:
            tag = "left"
        elif abs(p[0] - 1.0) < GRID_TOL and abs(q[0] - 1.0) < GRID_TOL:
            tag = "right"
        else:
            tag = "boundary"
            for k, hole in enumerate(holes):
                if _on_hole(p, q, hole):
                    tag, hole_id = "hole", k
                    break
        tags.append(tag)
        hole_ids.append(hole_id)
    return np.array(tags, dtype="<U8"), np.array(hole_ids, dtype=np.int64)


def build_unit_square_mesh(nx: int, ny: int, holes: Sequence[Sequence[float]] = ()) -> Mesh:
    """
    Structured mesh of (0,1)^2 with each cell split along its (0,0)-(1,1)
    diagonal. Holes are rectangles (x0, y0, x1, y1) snapped to grid lines;
    cells whose centers fall inside a hole are removed.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"Mesh resolution must be positive integers, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)
    holes = [tuple(float(c) for c in h) for h in holes]
    offending = []
    for h in holes:
        if len(h) != 4:
            offending.append(h)
            continue
        x0, y0, x1, y1 = h
        strictly_inside = 0.0 < x0 < x1 < 1.0 and 0.0 < y0 < y1 < 1.0
        snapped = all(abs(v * n - round(v * n)) <= GRID_TOL * n for v, n in ((x0, nx), (x1, nx), (y0, ny), (y1, ny)))
        if not (strictly_inside and snapped):
            offending.append(h)
    if offending:
        raise MeshError(f"Holes not representable on the {nx}x{ny} grid: {offending}")

    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    cx, cy = (I + 0.5) / nx, (J + 0.5) / ny
    masked = np.zeros(I.shape, dtype=bool)
    for x0, y0, x1, y1 in holes:
        masked |= (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1)

    v00 = J * (nx + 1) + I
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    cells = np.stack([np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)], axis=1)
    triangles = cells[~masked].reshape(-1, 3)

    used = np.unique(triangles)
    renumber = -np.ones(vertices.shape[0], dtype=np.int64)
    renumber[used] = np.arange(used.size)
    mesh = Mesh.from_triangles(vertices[used], renumber[triangles], holes, nx, ny)
    logger.debug(f"Built {nx}x{ny} mesh: {mesh.num_triangles} triangles, {mesh.num_vertices} vertices, {len(holes)} holes")
    return mesh


@dataclass(frozen=True)
class Quadrature:
    """Triangle rule in barycentric coordinates; weights sum to one (scaled by area per element)."""

    barycentric: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def num_points(self) -> int:
        return self.weights.size

    def total_nodes(self, mesh: Mesh) -> int:
        return mesh.num_triangles * self.num_points

    @classmethod
    def for_degree(cls, degree: int) -> "Quadrature":
        if degree <= 2:
            bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
            return cls(bary, np.full(3, 1 / 3), 2)
        if degree <= 4:
            a1, w1 = 0.44594849091596488631832925388305, 0.22338158967801146569500700843312
            a2, w2 = 0.091576213509770743459571463402202, 0.10995174365532186763832632490021
            b1, b2 = 1 - 2 * a1, 1 - 2 * a2
            bary = np.array([[b1, a1, a1], [a1, b1, a1], [a1, a1, b1], [b2, a2, a2], [a2, b2, a2], [a2, a2, b2]])
            return cls(bary, np.array([w1] * 3 + [w2] * 3), 4)
        raise FemError(f"No triangle rule of degree {degree}")


def _edge_rule(num_points: int):
    s, w = np.polynomial.legendre.leggauss(num_points)
    return 0.5 * (s + 1.0), 0.5 * w


def basis(degree: int, bary: np.ndarray):
    """Lagrange basis values (nq, nloc) and barycentric derivatives (nq, nloc, 3)."""
    bary = np.atleast_2d(bary)
    nq = bary.shape[0]
    if degree == 1:
        return bary.copy(), np.broadcast_to(np.eye(3), (nq, 3, 3)).copy()
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    values = np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1])
    z = np.zeros(nq)
    d = np.empty((nq, 6, 3))
    d[:, 0] = np.column_stack([4 * l0 - 1, z, z])
    d[:, 1] = np.column_stack([z, 4 * l1 - 1, z])
    d[:, 2] = np.column_stack([z, z, 4 * l2 - 1])
    d[:, 3] = np.column_stack([z, 4 * l2, 4 * l1])
    d[:, 4] = np.column_stack([4 * l2, z, 4 * l0])
    d[:, 5] = np.column_stack([4 * l1, 4 * l0, z])
    return values, d


def _edge_basis(degree: int, s: np.ndarray) -> np.ndarray:
    if degree == 1:
        return np.column_stack([1 - s, s])
    return np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)])


def _barycentric_gradients(mesh: Mesh) -> np.ndarray:
    x = mesh.vertices[mesh.triangles]
    area2 = 2.0 * mesh.areas
    g = np.empty((mesh.num_triangles, 3, 2))
    for k in range(3):
        a, b = x[:, (k + 1) % 3], x[:, (k + 2) % 3]
        g[:, k, 0] = (a[:, 1] - b[:, 1]) / area2
        g[:, k, 1] = (b[:, 0] - a[:, 0]) / area2
    return g


@dataclass
class ElementData:
    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    grads: np.ndarray


@dataclass
class EdgeData:
    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    dofs: np.ndarray
    tags: np.ndarray


class FnSpace:
    """Continuous Lagrange space of degree 1 or 2; P2 dofs are vertices then unique edges."""

    def __init__(self, mesh: Mesh, degree: int = 1):
        if degree not in (1, 2):
            raise FemError(f"Unsupported polynomial degree {degree}")
        self.mesh = mesh
        self.degree = degree
        self._element_cache = {}
        tri = mesh.triangles
        nv = mesh.num_vertices
        if degree == 1:
            self.cell_dofs = tri.copy()
            self.dof_coords = mesh.vertices.copy()
            self.boundary_edge_dofs = mesh.boundary_edges.copy()
            self.edges = None
            return
        local = np.sort(tri[:, [[1, 2], [2, 0], [0, 1]]], axis=2).reshape(-1, 2)
        edges, inverse = np.unique(local, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(tri.shape[0], 3)
        self.edges = edges
        self.cell_dofs = np.hstack([tri, nv + inverse])
        self.dof_coords = np.vstack([mesh.vertices, mesh.vertices[edges].mean(axis=1)])
        codes = edges[:, 0] * nv + edges[:, 1]
        bkeys = np.sort(mesh.boundary_edges, axis=1)
        bidx = np.searchsorted(codes, bkeys[:, 0] * nv + bkeys[:, 1])
        self.boundary_edge_dofs = np.column_stack([mesh.boundary_edges, nv + bidx])

    def __repr__(self):
        return f"FnSpace(P{self.degree}, n={self.n})"

    @property
    def n(self) -> int:
        return self.dof_coords.shape[0]

    @property
    def num_local(self) -> int:
        return 3 if self.degree == 1 else 6

    def default_quadrature(self) -> Quadrature:
        return Quadrature.for_degree(2 * self.degree)

    def element_data(self, quadrature: Optional[Quadrature] = None) -> ElementData:
        quad = quadrature or self.default_quadrature()
        cached = self._element_cache.get(quad.degree)
        if cached is not None:
            return cached
        mesh = self.mesh
        x = mesh.vertices[mesh.triangles]
        points = np.einsum("qk,ekd->eqd", quad.barycentric, x)
        weights = quad.weights[None, :] * mesh.areas[:, None]
        phi, dbary = basis(self.degree, quad.barycentric)
        grads = np.einsum("qlk,ekd->eqld", dbary, _barycentric_gradients(mesh))
        data = ElementData(points, weights, phi, grads)
        self._element_cache[quad.degree] = data
        return data

    def edge_data(self, tags: Optional[Iterable[str]] = None) -> EdgeData:
        mesh = self.mesh
        select = np.ones(mesh.boundary_edges.shape[0], dtype=bool)
        if tags is not None:
            select = np.isin(mesh.boundary_tags, list(tags))
        edges = mesh.boundary_edges[select]
        s, w = _edge_rule(self.degree + 1)
        a, b = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
        length = np.linalg.norm(b - a, axis=1)
        points = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        return EdgeData(points, w[None, :] * length[:, None], _edge_basis(self.degree, s), self.boundary_edge_dofs[select], mesh.boundary_tags[select])

    def boundary_dofs(self, tags: Union[str, Iterable[str]]) -> np.ndarray:
        tags = [tags] if isinstance(tags, str) else list(tags)
        unknown = [t for t in tags if t not in self.mesh.tags]
        if unknown:
            raise FemError(f"Unknown boundary tag(s) {unknown}; mesh has {sorted(self.mesh.tags)}")
        select = np.isin(self.mesh.boundary_tags, tags)
        return np.unique(self.boundary_edge_dofs[select])


def _scatter_matrix(space_rows: FnSpace, space_cols: FnSpace, local: np.ndarray, symmetric: bool = True):
    rows = np.broadcast_to(space_rows.cell_dofs[:, :, None], local.shape)
    cols = np.broadcast_to(space_cols.cell_dofs[:, None, :], local.shape)
    A = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(space_rows.n, space_cols.n)).tocsr()
    if symmetric:
        A = (0.5 * (A + A.T)).tocsr()
    A.sort_indices()
    return A


def _scatter_vector(space: FnSpace, local: np.ndarray) -> np.ndarray:
    return np.bincount(space.cell_dofs.ravel(), weights=local.ravel(), minlength=space.n)


def assemble_mass(space: FnSpace, quadrature: Optional[Quadrature] = None):
    data = space.element_data(quadrature)
    local = np.einsum("eq,qi,qj->eij", data.weights, data.phi, data.phi)
    return _scatter_matrix(space, space, local)


def _check_tensor(Theta) -> np.ndarray:
    Theta = np.asarray(Theta, dtype=float)
    if Theta.shape != (2, 2) or abs(Theta[0, 1] - Theta[1, 0]) > 1e-14 * max(1.0, np.abs(Theta).max()):
        raise FemError(f"Theta must be a symmetric 2x2 tensor, got {Theta.tolist()}")
    if np.linalg.eigvalsh(Theta).min() <= 0.0:
        raise FemError(f"Theta must be positive definite, got {Theta.tolist()}")
    return Theta


def anisotropic_tensor(alpha: float, theta1: float, theta2: float, complete: bool = True) -> np.ndarray:
    """
    Rotated diffusion tensor with principal values theta1 along
    (sin alpha, cos alpha) and theta2 across it.

    ``complete=False`` returns the abbreviated entries
    [[theta1 s^2, (theta1 - theta2) s c], [.., theta2 c^2]], which
    are not positive definite in general and are kept for comparison only.
    """
    s, c = np.sin(alpha), np.cos(alpha)
    if complete:
        off = (theta1 - theta2) * s * c
        return np.array([[theta1 * s * s + theta2 * c * c, off], [off, theta1 * c * c + theta2 * s * s]])
    off = (theta1 - theta2) * s * c
    return np.array([[theta1 * s * s, off], [off, theta2 * c * c]])


def assemble_stiffness(space: FnSpace, Theta=None, weight_q: Optional[np.ndarray] = None, quadrature: Optional[Quadrature] = None):
    data = space.element_data(quadrature)
    Theta = np.eye(2) if Theta is None else np.asarray(Theta, dtype=float)
    w = data.weights if weight_q is None else data.weights * weight_q
    local = np.einsum("eq,eqia,ab,eqjb->eij", w, data.grads, Theta, data.grads)
    return _scatter_matrix(space, space, local)


def assemble_boundary_mass(space: FnSpace, tags: Optional[Iterable[str]] = None):
    edge = space.edge_data(tags)
    local = np.einsum("bs,si,sj->bij", edge.weights, edge.phi, edge.phi)
    rows = np.broadcast_to(edge.dofs[:, :, None], local.shape)
    cols = np.broadcast_to(edge.dofs[:, None, :], local.shape)
    A = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(space.n, space.n)).tocsr()
    return (0.5 * (A + A.T)).tocsr()


def assemble_elliptic(space: FnSpace, gamma: float, Theta=None, delta: float = 0.0, robin_beta: float = 0.0, quadrature: Optional[Quadrature] = None):
    """K = gamma * stiffness(Theta) + delta * mass + robin_beta * boundary mass."""
    if gamma < 0.0 or delta < 0.0 or robin_beta < 0.0:
        raise FemError(f"Elliptic coefficients must be non-negative: gamma={gamma}, delta={delta}, beta={robin_beta}")
    Theta = _check_tensor(np.eye(2) if Theta is None else Theta)
    K = gamma * assemble_stiffness(space, Theta, quadrature=quadrature) + delta * assemble_mass(space, quadrature)
    if robin_beta > 0.0:
        K = K + robin_beta * assemble_boundary_mass(space)
    return K.tocsr()


def assemble_weighted_stiffness(space_u: FnSpace, weight_q: np.ndarray, quadrature: Optional[Quadrature] = None):
    """Stiffness with a pointwise coefficient given at the quadrature points (ne, nq)."""
    weight_q = np.asarray(weight_q, dtype=float)
    if np.any(weight_q < 0.0):
        e, q = np.unravel_index(int(np.argmin(weight_q)), weight_q.shape)
        raise FemError(f"Negative stiffness weight {weight_q[e, q]:.3e} at element {e}, quadrature point {q}")
    return assemble_stiffness(space_u, weight_q=weight_q, quadrature=quadrature)


def evaluate_at_quadrature(space: FnSpace, u: np.ndarray, quadrature: Optional[Quadrature] = None) -> np.ndarray:
    data = space.element_data(quadrature)
    return np.einsum("qi,ei->eq", data.phi, np.asarray(u)[space.cell_dofs])


def gradient_at_quadrature(space: FnSpace, u: np.ndarray, quadrature: Optional[Quadrature] = None) -> np.ndarray:
    data = space.element_data(quadrature)
    return np.einsum("eqid,ei->eqd", data.grads, np.asarray(u)[space.cell_dofs])


def stiffness_action(space_u: FnSpace, weight_q: np.ndarray, u: np.ndarray, quadrature: Optional[Quadrature] = None) -> np.ndarray:
    """Vector (int weight grad u . grad phi_j)_j, any sign of weight."""
    data = space_u.element_data(quadrature)
    flux = (data.weights * weight_q)[:, :, None] * gradient_at_quadrature(space_u, u, quadrature)
    return _scatter_vector(space_u, np.einsum("eqd,eqjd->ej", flux, data.grads))


def weighted_gradient_inner(space_m: FnSpace, space_u: FnSpace, weight_q: np.ndarray, a: np.ndarray, b: np.ndarray, quadrature: Quadrature) -> np.ndarray:
    """Vector over space_m dofs: (int phi_i weight grad a . grad b)_i."""
    data_m = space_m.element_data(quadrature)
    ga = gradient_at_quadrature(space_u, a, quadrature)
    gb = gradient_at_quadrature(space_u, b, quadrature)
    integrand = data_m.weights * weight_q * np.einsum("eqd,eqd->eq", ga, gb)
    return _scatter_vector(space_m, np.einsum("eq,qi->ei", integrand, data_m.phi))


def _values_at(fn: ValueFn, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape)
    return np.full(x.shape, float(fn))


def assemble_load(space: FnSpace, f: ValueFn, quadrature: Optional[Quadrature] = None) -> np.ndarray:
    data = space.element_data(quadrature)
    fq = _values_at(f, data.points[..., 0], data.points[..., 1])
    return _scatter_vector(space, np.einsum("eq,eq,qi->ei", data.weights, fq, data.phi))


def assemble_boundary_load(space: FnSpace, h: ValueFn, tags: Iterable[str]) -> np.ndarray:
    edge = space.edge_data(tags)
    hq = _values_at(h, edge.points[..., 0], edge.points[..., 1])
    local = np.einsum("bs,bs,sj->bj", edge.weights, hq, edge.phi)
    return np.bincount(edge.dofs.ravel(), weights=local.ravel(), minlength=space.n)


def assemble_advection(space: FnSpace, velocity_q: np.ndarray, quadrature: Optional[Quadrature] = None):
    """Nonsymmetric N_ij = int (v . grad phi_j) phi_i."""
    data = space.element_data(quadrature)
    local = np.einsum("eq,eqd,eqjd,qi->eij", data.weights, velocity_q, data.grads, data.phi)
    return _scatter_matrix(space, space, local, symmetric=False)


def assemble_streamline_diffusion(space: FnSpace, velocity_q: np.ndarray, tau: np.ndarray, quadrature: Optional[Quadrature] = None):
    """Sum over elements of tau_e int (v . grad phi_i)(v . grad phi_j)."""
    data = space.element_data(quadrature)
    vg = np.einsum("eqd,eqid->eqi", velocity_q, data.grads)
    local = np.einsum("e,eq,eqi,eqj->eij", tau, data.weights, vg, vg)
    return _scatter_matrix(space, space, local)


def interpolate(space: FnSpace, fn: ValueFn) -> np.ndarray:
    return _values_at(fn, space.dof_coords[:, 0], space.dof_coords[:, 1]).copy()


def l2_norm(space: FnSpace, u: np.ndarray, quadrature: Optional[Quadrature] = None) -> float:
    data = space.element_data(quadrature)
    return float(np.sqrt(np.sum(data.weights * evaluate_at_quadrature(space, u, quadrature) ** 2)))


def l2_error(space: FnSpace, u: np.ndarray, exact: ValueFn, quadrature: Optional[Quadrature] = None) -> float:
    quad = quadrature or Quadrature.for_degree(4)
    data = space.element_data(quad)
    diff = evaluate_at_quadrature(space, u, quad) - _values_at(exact, data.points[..., 0], data.points[..., 1])
    return float(np.sqrt(np.sum(data.weights * diff**2)))


def locate_points(mesh: Mesh, points, chunk: int = 256):
    """Containing triangle and barycentric coordinates for each point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = mesh.vertices[mesh.triangles]
    a = x[:, 1, 0] - x[:, 0, 0]
    b = x[:, 2, 0] - x[:, 0, 0]
    c = x[:, 1, 1] - x[:, 0, 1]
    d = x[:, 2, 1] - x[:, 0, 1]
    det = a * d - b * c
    owner = np.empty(pts.shape[0], dtype=np.int64)
    bary = np.empty((pts.shape[0], 3))
    for start in range(0, pts.shape[0], chunk):
        p = pts[start : start + chunk]
        dx = p[:, 0:1] - x[None, :, 0, 0]
        dy = p[:, 1:2] - x[None, :, 0, 1]
        l1 = (d * dx - b * dy) / det
        l2 = (a * dy - c * dx) / det
        l0 = 1.0 - l1 - l2
        score = np.minimum(np.minimum(l0, l1), l2)
        best = np.argmax(score, axis=1)
        rows = np.arange(p.shape[0])
        outside = np.flatnonzero(score[rows, best] < -LOCATE_TOL)
        if outside.size:
            idx = start + int(outside[0])
            raise FemError(f"Observation point {idx} at {pts[idx].tolist()} is outside the mesh")
        owner[start : start + p.shape[0]] = best
        bary[start : start + p.shape[0]] = np.column_stack([l0[rows, best], l1[rows, best], l2[rows, best]])
    return owner, bary


def point_observation(space: FnSpace, points):
    """Sparse q x n matrix whose row i evaluates a field at point i."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    q = pts.shape[0]
    if q == 0:
        return sp.csr_matrix((0, space.n))
    owner, bary = locate_points(space.mesh, pts)
    values, _ = basis(space.degree, bary)
    rows = np.repeat(np.arange(q), space.num_local)
    cols = space.cell_dofs[owner].ravel()
    B = sp.coo_matrix((values.ravel(), (rows, cols)), shape=(q, space.n)).tocsr()
    B.sum_duplicates()
    return B


def gradient_at_points(space: FnSpace, u: np.ndarray, points) -> np.ndarray:
    """Gradient of a field at arbitrary points, taken in the owning triangle."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)
    owner, bary = locate_points(space.mesh, pts)
    _, dbary = basis(space.degree, bary)
    grads = np.einsum("plk,pkd->pld", dbary, _barycentric_gradients(space.mesh)[owner])
    return np.einsum("pld,pl->pd", grads, np.asarray(u)[space.cell_dofs[owner]])


def weak_divergence(space: FnSpace, velocity_q: np.ndarray, quadrature: Optional[Quadrature] = None) -> np.ndarray:
    """(int v . grad phi_j)_j; zero for a divergence-free field tangent to the boundary."""
    data = space.element_data(quadrature)
    local = np.einsum("eq,eqd,eqjd->ej", data.weights, velocity_q, data.grads)
    return _scatter_vector(space, local)


def interpolation_matrix(source: FnSpace, target: FnSpace):
    """Matrix mapping source dofs to the interpolant's target dofs (same mesh)."""
    if source.mesh is not target.mesh:
        raise FemError("Interpolation between spaces on different meshes is not supported")
    if source.degree == target.degree:
        return sp.identity(source.n, format="csr")
    return point_observation(source, target.dof_coords)


def eliminate_dofs(matrix, rhs: np.ndarray, dofs: np.ndarray, values: np.ndarray):
    """Symmetric elimination: constrained rows/cols become identity, rhs carries the values."""
    A = sp.csr_matrix(matrix)
    g = np.zeros(A.shape[0])
    g[dofs] = values
    b = np.asarray(rhs, dtype=float) - A @ g
    b[dofs] = values
    keep = np.ones(A.shape[0])
    keep[dofs] = 0.0
    D = sp.diags(keep)
    A = (D @ A @ D + sp.diags(1.0 - keep)).tocsr()
    A.eliminate_zeros()
    return A, b


def apply_dirichlet(matrix, rhs: np.ndarray, space: FnSpace, boundary_tag: Union[str, Iterable[str]], value_fn: ValueFn = 0.0):
    dofs = space.boundary_dofs(boundary_tag)
    coords = space.dof_coords[dofs]
    return eliminate_dofs(matrix, rhs, dofs, _values_at(value_fn, coords[:, 0], coords[:, 1]))


@dataclass
class EllipticCoefficients:
    gamma: float
    delta: float
    Theta: np.ndarray = field(default_factory=lambda: np.eye(2))
    robin_beta: float = 0.0


@dataclass
class RectFactor:
    """Sparse n x q_tot matrix C with C C^T equal to the assembled form."""

    C: sp.csr_matrix
    form: str

    @property
    def q_tot(self) -> int:
        return self.C.shape[1]

    def product(self):
        return (self.C @ self.C.T).tocsr()


def _matrix_sqrt(Theta: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(Theta)
    return (vectors * np.sqrt(values)) @ vectors.T


def rect_factor(space: FnSpace, form: Union[str, EllipticCoefficients] = "mass", quadrature: Optional[Quadrature] = None) -> RectFactor:
    """
    Per-quadrature-point square roots of the element forms, stacked so each
    quadrature node owns its own columns.
    """
    data = space.element_data(quadrature)
    ne, nq, nloc = data.grads.shape[:3]
    rows_e = np.broadcast_to(space.cell_dofs[:, None, :], (ne, nq, nloc))
    sqrt_w = np.sqrt(data.weights)
    if isinstance(form, str):
        if form != "mass":
            raise FemError(f"Unknown rectangular-factor form {form!r}")
        vals = sqrt_w[:, :, None] * data.phi[None, :, :]
        cols = np.broadcast_to(np.arange(ne * nq).reshape(ne, nq)[:, :, None], vals.shape)
        C = sp.coo_matrix((vals.ravel(), (rows_e.ravel(), cols.ravel())), shape=(space.n, ne * nq)).tocsr()
        return RectFactor(C, "mass")

    coeffs = form
    if coeffs.gamma < 0.0 or coeffs.delta < 0.0 or coeffs.robin_beta < 0.0:
        raise FemError("Indefinite element block: elliptic coefficients must be non-negative")
    Theta_half = _matrix_sqrt(_check_tensor(coeffs.Theta))
    vals = np.empty((ne, nq, nloc, 3))
    vals[..., :2] = np.sqrt(coeffs.gamma) * sqrt_w[:, :, None, None] * np.einsum("eqid,kd->eqik", data.grads, Theta_half)
    vals[..., 2] = np.sqrt(coeffs.delta) * sqrt_w[:, :, None] * data.phi[None, :, :]
    cols = np.broadcast_to((np.arange(ne * nq).reshape(ne, nq, 1, 1) * 3 + np.arange(3)), vals.shape)
    rows = np.broadcast_to(rows_e[..., None], vals.shape)
    n_interior = ne * nq * 3
    all_rows, all_cols, all_vals = [rows.ravel()], [cols.ravel()], [vals.ravel()]
    n_cols = n_interior
    if coeffs.robin_beta > 0.0:
        edge = space.edge_data()
        nb, ns = edge.weights.shape
        evals = np.sqrt(coeffs.robin_beta * edge.weights)[:, :, None] * edge.phi[None, :, :]
        ecols = n_interior + np.broadcast_to(np.arange(nb * ns).reshape(nb, ns, 1), evals.shape)
        erows = np.broadcast_to(edge.dofs[:, None, :], evals.shape)
        all_rows.append(erows.ravel())
        all_cols.append(ecols.ravel())
        all_vals.append(evals.ravel())
        n_cols += nb * ns
    C = sp.coo_matrix((np.concatenate(all_vals), (np.concatenate(all_rows), np.concatenate(all_cols))), shape=(space.n, n_cols)).tocsr()
    return RectFactor(C, "elliptic")
