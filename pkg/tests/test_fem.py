import numpy as np
import pytest
import scipy.sparse.linalg as spla

from numerics import fem


def dense(A):
    return A.toarray()


class TestMesh:
    def test_unit_square_counts(self):
        mesh = fem.build_unit_square_mesh(4, 4)
        assert mesh.num_vertices == 25
        assert mesh.num_triangles == 32
        assert mesh.tags == {"bottom", "top", "left", "right"}
        assert np.all(mesh.areas > 0.0)
        assert mesh.areas.sum() == pytest.approx(1.0)

    def test_hole_removes_cells(self):
        mesh = fem.build_unit_square_mesh(4, 4, [(0.25, 0.25, 0.5, 0.5)])
        assert mesh.num_triangles == 30
        assert "hole" in mesh.tags
        assert mesh.areas.sum() == pytest.approx(1.0 - 1.0 / 16.0)
        hole_edges = mesh.boundary_tags == "hole"
        assert hole_edges.sum() == 4
        assert np.all(mesh.boundary_hole_ids[hole_edges] == 0)

    def test_two_holes_tagged_separately(self):
        mesh = fem.build_unit_square_mesh(8, 8, [(0.25, 0.25, 0.5, 0.5), (0.625, 0.625, 0.75, 0.875)])
        ids = set(mesh.boundary_hole_ids[mesh.boundary_tags == "hole"].tolist())
        assert ids == {0, 1}

    @pytest.mark.parametrize("hole", [(0.3, 0.25, 0.5, 0.5), (0.0, 0.25, 0.5, 0.5), (0.5, 0.25, 0.25, 0.5)])
    def test_rejects_bad_holes(self, hole):
        with pytest.raises(fem.MeshError):
            fem.build_unit_square_mesh(4, 4, [hole])

    def test_rejects_bad_resolution(self):
        with pytest.raises(fem.MeshError):
            fem.build_unit_square_mesh(0, 4)


class TestSpaces:
    def test_quadrature_weights(self):
        for degree in (2, 4):
            quad = fem.Quadrature.for_degree(degree)
            assert quad.weights.sum() == pytest.approx(1.0)
            np.testing.assert_allclose(quad.barycentric.sum(axis=1), 1.0)
        with pytest.raises(fem.FemError):
            fem.Quadrature.for_degree(7)

    def test_p2_dof_count(self):
        mesh = fem.build_unit_square_mesh(4, 4)
        assert fem.FnSpace(mesh, 2).n == 81
        assert fem.FnSpace(mesh, 1).n == 25

    def test_unsupported_degree(self, mesh8):
        with pytest.raises(fem.FemError):
            fem.FnSpace(mesh8, 3)

    def test_boundary_dofs(self):
        space = fem.FnSpace(fem.build_unit_square_mesh(4, 4), 2)
        bottom = space.boundary_dofs("bottom")
        assert bottom.size == 9
        np.testing.assert_allclose(space.dof_coords[bottom, 1], 0.0)
        with pytest.raises(fem.FemError):
            space.boundary_dofs("hole")


class TestAssembly:
    @pytest.mark.parametrize("degree", [1, 2])
    def test_mass_integrates_area(self, mesh8, degree):
        space = fem.FnSpace(mesh8, degree)
        M = fem.assemble_mass(space)
        ones = np.ones(space.n)
        assert ones @ M @ ones == pytest.approx(1.0, abs=1e-13)
        x = space.dof_coords[:, 0]
        assert x @ M @ x == pytest.approx(1.0 / 3.0, abs=1e-13)

    @pytest.mark.parametrize("degree", [1, 2])
    def test_stiffness_energies(self, mesh8, degree):
        space = fem.FnSpace(mesh8, degree)
        K = fem.assemble_stiffness(space)
        np.testing.assert_allclose(K @ np.ones(space.n), 0.0, atol=1e-12)
        x = space.dof_coords[:, 0]
        assert x @ K @ x == pytest.approx(1.0, abs=1e-12)
        if degree == 2:
            u = x**2
            assert u @ K @ u == pytest.approx(4.0 / 3.0, abs=1e-12)

    def test_weighted_stiffness_linearity(self, p1_space8):
        quad = p1_space8.default_quadrature()
        shape = (p1_space8.mesh.num_triangles, quad.num_points)
        K = fem.assemble_stiffness(p1_space8)
        np.testing.assert_allclose(dense(fem.assemble_weighted_stiffness(p1_space8, np.ones(shape))), dense(K), atol=1e-13)
        np.testing.assert_allclose(dense(fem.assemble_weighted_stiffness(p1_space8, 2.0 * np.ones(shape))), 2.0 * dense(K), atol=1e-13)
        with pytest.raises(fem.FemError):
            fem.assemble_weighted_stiffness(p1_space8, -np.ones(shape))

    def test_stiffness_action_matches_matrix(self, p1_space8, rng):
        quad = p1_space8.default_quadrature()
        weight = rng.random((p1_space8.mesh.num_triangles, quad.num_points)) + 0.5
        u = rng.standard_normal(p1_space8.n)
        A = fem.assemble_weighted_stiffness(p1_space8, weight)
        np.testing.assert_allclose(fem.stiffness_action(p1_space8, weight, u), A @ u, atol=1e-12)

    def test_advection_kills_constants(self, p1_space8, rng):
        quad = p1_space8.default_quadrature()
        v = rng.standard_normal((p1_space8.mesh.num_triangles, quad.num_points, 2))
        N = fem.assemble_advection(p1_space8, v)
        np.testing.assert_allclose(N @ np.ones(p1_space8.n), 0.0, atol=1e-13)

    def test_elliptic_rejects_negative_coefficients(self, p1_space8):
        with pytest.raises(fem.FemError):
            fem.assemble_elliptic(p1_space8, -1.0)

    def test_anisotropic_tensor(self):
        Theta = fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5)
        np.testing.assert_allclose(np.linalg.eigvalsh(Theta), [0.5, 2.0])
        np.testing.assert_allclose(Theta, Theta.T)
        short = fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5, complete=False)
        np.testing.assert_allclose(short, [[1.0, 0.75], [0.75, 0.25]])

    def test_incomplete_tensor_is_rejected(self, p1_space8):
        with pytest.raises(fem.FemError):
            fem.assemble_elliptic(p1_space8, 1.0, fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5, complete=False), 1.0)

    def test_load_and_boundary_load(self, p1_space8):
        assert fem.assemble_load(p1_space8, 3.0).sum() == pytest.approx(3.0)
        assert fem.assemble_boundary_load(p1_space8, 2.0, ["left"]).sum() == pytest.approx(2.0)
        assert fem.assemble_boundary_load(p1_space8, lambda x, y: y, ["left", "right"]).sum() == pytest.approx(1.0)


class TestRectFactor:
    def test_single_triangle_mass(self):
        mesh = fem.Mesh.from_triangles([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])
        space = fem.FnSpace(mesh, 1)
        factor = fem.rect_factor(space, "mass")
        assert factor.C.shape == (3, 3)
        expected = 0.5 / 12.0 * np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
        np.testing.assert_allclose(dense(factor.product()), expected, atol=1e-15)

    @pytest.mark.parametrize("nx", [2, 4, 16])
    def test_mass_recomposition(self, nx):
        space = fem.FnSpace(fem.build_unit_square_mesh(nx, nx), 1)
        M = dense(fem.assemble_mass(space))
        CCt = dense(fem.rect_factor(space, "mass").product())
        assert np.linalg.norm(CCt - M) / np.linalg.norm(M) < 1e-12

    @pytest.mark.parametrize(
        "coeffs",
        [
            fem.EllipticCoefficients(1.0, 1.0),
            fem.EllipticCoefficients(0.1, 0.5, fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5), 0.16),
        ],
    )
    def test_elliptic_recomposition(self, coeffs):
        space = fem.FnSpace(fem.build_unit_square_mesh(16, 16, [(0.25, 0.25, 0.5, 0.5)]), 1)
        K = dense(fem.assemble_elliptic(space, coeffs.gamma, coeffs.Theta, coeffs.delta, coeffs.robin_beta))
        CCt = dense(fem.rect_factor(space, coeffs).product())
        assert np.linalg.norm(CCt - K) / np.linalg.norm(K) < 1e-12

    def test_rejects_unknown_form(self, p1_space8):
        with pytest.raises(fem.FemError):
            fem.rect_factor(p1_space8, "stiffness")


class TestPointsAndInterpolation:
    def test_row_at_dof_is_unit_vector(self, p1_space8):
        B = fem.point_observation(p1_space8, p1_space8.dof_coords[[10]])
        expected = np.zeros(p1_space8.n)
        expected[10] = 1.0
        np.testing.assert_allclose(dense(B)[0], expected, atol=1e-14)

    def test_barycenter_weights(self, mesh8, p1_space8):
        center = mesh8.vertices[mesh8.triangles[5]].mean(axis=0)
        row = dense(fem.point_observation(p1_space8, center))[0]
        np.testing.assert_allclose(row[mesh8.triangles[5]], 1.0 / 3.0, atol=1e-14)
        assert row.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("degree", [1, 2])
    def test_linear_reproduction(self, mesh8, rng, degree):
        space = fem.FnSpace(mesh8, degree)
        points = rng.random((50, 2))
        u = fem.interpolate(space, lambda x, y: x + y)
        np.testing.assert_allclose(fem.point_observation(space, points) @ u, points.sum(axis=1), atol=1e-12)

    def test_point_outside_mesh(self):
        space = fem.FnSpace(fem.build_unit_square_mesh(4, 4, [(0.25, 0.25, 0.5, 0.5)]), 1)
        with pytest.raises(fem.FemError):
            fem.point_observation(space, [[0.4, 0.4]])

    def test_empty_observation(self, p1_space8):
        assert fem.point_observation(p1_space8, np.zeros((0, 2))).shape == (0, p1_space8.n)

    def test_interpolation_p1_to_p2(self, mesh8):
        p1, p2 = fem.FnSpace(mesh8, 1), fem.FnSpace(mesh8, 2)
        P = fem.interpolation_matrix(p1, p2)
        u1 = fem.interpolate(p1, lambda x, y: 2 * x - y)
        np.testing.assert_allclose(P @ u1, fem.interpolate(p2, lambda x, y: 2 * x - y), atol=1e-13)

    def test_gradient_at_points(self, mesh8, rng):
        space = fem.FnSpace(mesh8, 2)
        u = fem.interpolate(space, lambda x, y: x * x + 3 * y)
        points = rng.random((20, 2))
        g = fem.gradient_at_points(space, u, points)
        np.testing.assert_allclose(g[:, 0], 2 * points[:, 0], atol=1e-12)
        np.testing.assert_allclose(g[:, 1], 3.0, atol=1e-12)

    def test_l2_error_of_exact_interpolant(self, p1_space8):
        u = fem.interpolate(p1_space8, lambda x, y: 1 + x - y)
        assert fem.l2_error(p1_space8, u, lambda x, y: 1 + x - y) < 1e-13


class TestBoundaryValueProblems:
    def test_linear_solution_is_exact(self):
        space = fem.FnSpace(fem.build_unit_square_mesh(6, 6), 1)
        A = fem.assemble_stiffness(space)
        A_bc, b = fem.apply_dirichlet(A, np.zeros(space.n), space, ("bottom", "top"), lambda x, y: y)
        assert abs(A_bc - A_bc.T).max() < 1e-14
        u = spla.spsolve(A_bc.tocsc(), b)
        np.testing.assert_allclose(u, space.dof_coords[:, 1], atol=1e-10)

    def test_manufactured_convergence(self):
        errors = []
        for n in (8, 16):
            space = fem.FnSpace(fem.build_unit_square_mesh(n, n), 1)
            A = fem.assemble_stiffness(space)
            load = fem.assemble_load(space, -4.0)
            A_bc, b = fem.apply_dirichlet(A, load, space, fem.OUTER_TAGS, lambda x, y: x**2 + y**2)
            u = spla.spsolve(A_bc.tocsc(), b)
            errors.append(fem.l2_error(space, u, lambda x, y: x**2 + y**2))
        assert errors[0] / errors[1] > 3.0
