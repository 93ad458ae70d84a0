import numpy as np
import pytest
from pydantic import ValidationError

from config import RunConfig
from inference.model import HessianMode, SolveContext
from inference.newtoncg import NewtonConfig, armijo_linesearch, solve
from problems import poisson


def square(x):
    return float(x @ x)


class TestArmijo:
    def test_newton_step_on_quadratic(self):
        m = np.array([1.0])
        result = armijo_linesearch(square, m, np.array([-1.0]), 2.0 * m, NewtonConfig())
        assert result.accepted
        assert result.alpha == 1.0
        assert result.cost == 0.0

    def test_overshooting_step_is_halved_twice(self):
        m = np.array([1.0])
        result = armijo_linesearch(square, m, np.array([-4.0]), 2.0 * m, NewtonConfig(), cost_m=1.0)
        assert result.accepted
        assert result.alpha == 0.25
        assert result.evaluations == 3
        np.testing.assert_array_equal(result.m, [0.0])

    def test_ascent_direction_is_replaced(self):
        m = np.array([1.0])
        result = armijo_linesearch(square, m, np.array([1.0]), 2.0 * m, NewtonConfig())
        assert result.replaced_direction
        assert result.accepted
        assert result.cost < 1.0

    def test_exhaustion_keeps_point(self):
        m = np.array([1.0, 2.0])
        cfg = NewtonConfig(max_backtracking_iter=4)
        result = armijo_linesearch(lambda x: 5.0, m, np.array([-1.0, 0.0]), np.array([1.0, 0.0]), cfg)
        assert not result.accepted
        assert result.alpha == 0.0
        assert result.evaluations == 5
        np.testing.assert_array_equal(result.m, m)


class TestNewtonConfig:
    @pytest.mark.parametrize("mode", ["misfit_only", "gauss_newton_misfit"])
    def test_rejects_misfit_modes(self, mode):
        with pytest.raises(ValidationError):
            NewtonConfig(hessian_mode=mode)

    def test_rejects_bad_tolerance(self):
        with pytest.raises(ValidationError):
            NewtonConfig(grad_rtol=2.0)

    def test_accepts_gauss_newton(self):
        assert NewtonConfig(hessian_mode="gauss_newton").hessian_mode == HessianMode.GAUSS_NEWTON


def dense_linear_map(model, prior, p2o_matrix):
    F = p2o_matrix(model)
    R = prior.R_op.to_dense()
    d = model.data.ravel()
    H = F.T @ F / model.noise_variance + R
    return np.linalg.solve(H, F.T @ d / model.noise_variance + R @ prior.mean)


class TestNewtonSolve:
    def test_linear_problem_in_one_step(self, advdiff_tiny, p2o_matrix):
        model, prior, _ = advdiff_tiny
        expected = dense_linear_map(model, prior, p2o_matrix)
        m, trace = solve(model, prior, prior.mean, NewtonConfig(eta_max=1e-10))
        assert trace.converged
        assert trace.num_iterations <= 2
        assert np.linalg.norm(m - expected) / np.linalg.norm(expected) < 1e-6

    def test_nonlinear_problem_converges(self, poisson8):
        model, prior, _ = poisson8
        m, trace = solve(model, prior, prior.mean)
        assert trace.converged, trace.reason
        costs = trace.costs
        assert all(b < a for a, b in zip(costs, costs[1:]))
        assert trace.iterations[-1].gradnorm <= max(1e-9, 1e-6 * trace.iterations[0].gradnorm)
        assert trace.total_cg_iterations > 0

    def test_gauss_newton_start(self, poisson8):
        model, prior, _ = poisson8
        m_full, _ = solve(model, prior, prior.mean)
        m_gn, trace = solve(model, prior, prior.mean, NewtonConfig(gn_iter=2))
        assert trace.converged
        assert np.linalg.norm(m_gn - m_full) / np.linalg.norm(m_full) < 1e-4

    def test_zero_iterations(self, poisson8):
        model, prior, _ = poisson8
        m, trace = solve(model, prior, prior.mean, NewtonConfig(max_iter=0))
        assert trace.reason == "max_iter"
        assert len(trace.iterations) == 1
        np.testing.assert_array_equal(m, prior.mean)

    def test_stationary_start(self, poisson8):
        model, prior, _ = poisson8
        model.data = model.observe(model.solve_forward(prior.mean))
        m, trace = solve(model, prior, prior.mean)
        assert trace.converged
        assert trace.num_iterations == 0

    def test_shared_context(self, poisson8):
        model, prior, _ = poisson8
        context = SolveContext(model, prior)
        m, _ = solve(model, prior, prior.mean, context=context)
        np.testing.assert_array_equal(context.state, model.solve_forward(m))

    def test_trace_csv(self, poisson8, tmp_path):
        model, prior, _ = poisson8
        _, trace = solve(model, prior, prior.mean, NewtonConfig(max_iter=2))
        path = tmp_path / "newton.csv"
        trace.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,cost,misfit,reg,gradnorm,cg_iters,alpha"
        assert len(lines) == len(trace.iterations) + 1
        first = lines[1].split(",")
        assert int(first[0]) == 0
        assert float(first[1]) == trace.iterations[0].cost


@pytest.mark.slow
def test_newton_iterations_are_mesh_independent():
    traces = []
    for nx in (16, 32):
        cfg = RunConfig.model_validate({"problem": "poisson", "mesh": {"nx": nx, "ny": nx}})
        bundle = poisson.build_problem(cfg)
        _, trace = solve(bundle.model, bundle.prior, bundle.m0, cfg.newton_config())
        assert trace.converged, trace.reason
        traces.append(trace)
    coarse, fine = traces
    assert abs(coarse.num_iterations - fine.num_iterations) <= 3
    cg = (coarse.total_cg_iterations, fine.total_cg_iterations)
    assert abs(cg[0] - cg[1]) <= 0.5 * max(cg)
