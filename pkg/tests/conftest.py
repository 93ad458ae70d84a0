"""Shared fixtures for the inverse-flow test suite."""

import numpy as np
import pytest

from inference.prior import BiLaplacianPrior
from numerics import fem
from problems import advdiff, poisson


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def spd_matrix():
    def make(n, seed=0, shift=1.0):
        X = np.random.default_rng(seed).standard_normal((n, n))
        return X @ X.T + shift * n * np.eye(n)

    return make


@pytest.fixture(scope="module")
def mesh8():
    return fem.build_unit_square_mesh(8, 8)


@pytest.fixture(scope="module")
def p1_space8(mesh8):
    return fem.FnSpace(mesh8, 1)


@pytest.fixture(scope="module")
def prior8(p1_space8):
    return BiLaplacianPrior(p1_space8, 0.1, 0.5, fem.anisotropic_tensor(np.pi / 4, 2.0, 0.5))


@pytest.fixture
def poisson8():
    """8x8 Poisson model with noisy data from the bump coefficient."""
    mesh = fem.build_unit_square_mesh(8, 8)
    points = poisson.random_points(12, (0.1, 0.1, 0.9, 0.9), seed=3)
    model = poisson.PoissonModel(mesh, points, noise_std=0.05)
    m_true = fem.interpolate(model.param_space, poisson.default_truth())
    model.data = model.observe(model.solve_forward(m_true)) + 0.05 * np.random.default_rng(4).standard_normal(12)
    prior = BiLaplacianPrior(model.param_space, 0.1, 0.5)
    return model, prior, m_true


def make_advdiff(nx=6, num_steps=8, num_points=6, kappa=0.01, holes=((1 / 3, 1 / 3, 2 / 3, 2 / 3),), times=(0.5, 0.75, 1.0)):
    mesh = fem.build_unit_square_mesh(nx, nx, holes)
    points = advdiff.random_points_outside_holes(num_points, mesh.holes, 0.05, seed=7)
    model = advdiff.AdvDiffModel(
        mesh,
        advdiff.default_velocity(mesh),
        points,
        list(times),
        kappa=kappa,
        t_final=1.0,
        num_steps=num_steps,
        noise_variance=1e-2,
    )
    prior = BiLaplacianPrior(model.param_space, 1.0, 8.0)
    return model, prior


@pytest.fixture
def advdiff_tiny():
    model, prior = make_advdiff()
    m_true = fem.interpolate(model.param_space, advdiff.default_truth((0.2, 0.8)))
    model.data = model.observe(model.solve_forward(m_true)) + 0.1 * np.random.default_rng(8).standard_normal(model.data.shape)
    return model, prior, m_true


def dense_p2o(model):
    """Column-by-column parameter-to-observable matrix of a linear model."""
    n = model.param_space.n
    return np.column_stack([model.apply_p2o(e) for e in np.eye(n)])


@pytest.fixture
def advdiff_factory():
    return make_advdiff


@pytest.fixture
def p2o_matrix():
    return dense_p2o
