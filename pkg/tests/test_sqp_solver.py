import pytest
from context import hivopt

import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp

from hivopt.problem import NlpProblem
from hivopt.problems import ClosedFormProblem
from hivopt.sqp_solver import (
    CONVERGED,
    INFEASIBLE,
    LINE_SEARCH_FAILURE,
    MAX_ITER,
    SolverOptions,
    _cpr_groups,
    fd_jacobian,
    history_columns,
    kkt_residual,
    solve,
)

tight = SolverOptions(constraint_tol=1e-10, kkt_tol=1e-10)


@pytest.mark.parametrize("problem_type, hessian", [("bound", "bfgs"), ("equality", "bfgs"), ("product", "fd")])
def test_closed_form_problems(problem_type, hessian):
    problem = ClosedFormProblem(problem_type)
    result = solve(problem, problem.x0, tight.replace(hessian=hessian))
    assert result.status == CONVERGED, str(result)
    assert result.iterations <= 20
    assert np.allclose(result.x, problem.x_opt, atol=1e-8)
    assert result.objective == pytest.approx(problem.f_opt, abs=1e-8)


def test_product_problem_with_bfgs():
    problem = ClosedFormProblem("product")
    result = solve(problem, problem.x0, SolverOptions(max_iter=200, constraint_tol=1e-9, kkt_tol=1e-8))
    assert result.converged, str(result)
    assert np.allclose(result.x, [1.0, 1.0], atol=1e-6)
    assert result.ineq_multipliers[0] == pytest.approx(0.5, abs=1e-6)


def test_bound_problem_multiplier():
    problem = ClosedFormProblem("bound")
    result = solve(problem, problem.x0, tight)
    assert result.iterations == 2
    assert result.bound_multipliers[0] == pytest.approx(2.0)


@pytest.mark.parametrize("problem_type", ["bound", "equality", "product"])
def test_kkt_residual_vanishes_at_known_optimum(problem_type):
    problem = ClosedFormProblem(problem_type)
    assert kkt_residual(problem, problem.x_opt, problem.multipliers) <= 1e-12
    lam_e, lam_i, lam_b = problem.multipliers
    if lam_b is not None:
        assert kkt_residual(problem, problem.x_opt, (lam_e, lam_i, lam_b + 1.0)) >= 0.5


def test_random_equality_qp():
    problem = ClosedFormProblem("random", n=10, m=4, seed=3)
    assert kkt_residual(problem, problem.x_opt, problem.multipliers) <= 1e-8
    newton = solve(problem, problem.x0, SolverOptions(hessian="fd", kkt_tol=1e-8))
    assert newton.converged and newton.iterations <= 5
    quasi_newton = solve(problem, problem.x0, SolverOptions(max_iter=300, kkt_tol=1e-8))
    assert quasi_newton.converged, str(quasi_newton)
    for result in (newton, quasi_newton):
        assert np.allclose(result.x, problem.x_opt, atol=1e-6)
        assert np.allclose(result.eq_multipliers, problem.multipliers[0], atol=1e-5)


@pytest.mark.parametrize("problem_type", ["bound", "equality"])
def test_finite_difference_fallback(problem_type):
    problem = ClosedFormProblem(problem_type, analytic_derivatives=False)
    result = solve(problem, problem.x0, SolverOptions(kkt_tol=1e-7))
    assert result.converged, str(result)
    assert np.allclose(result.x, problem.x_opt, atol=1e-6)


def test_inconsistent_constraints_are_reported():
    problem = NlpProblem(
        info="x <= -1 and x >= 1",
        n=1,
        func=lambda x: x[0] ** 2,
        grad=lambda x: 2.0 * x,
        ineq_constraints=lambda x: jnp.array([x[0] + 1.0, 1.0 - x[0]]),
        ineq_jacobian=lambda x: np.array([[1.0], [-1.0]]),
    )
    result = solve(problem, np.array([0.3]), SolverOptions(max_iter=30))
    assert not result.converged
    assert result.status in (MAX_ITER, LINE_SEARCH_FAILURE, INFEASIBLE)
    assert result.violation >= 1.0 - 1e-9


def test_history_has_one_row_per_iteration():
    problem = ClosedFormProblem("equality")
    result = solve(problem, problem.x0, tight)
    assert tuple(result.history) == history_columns
    assert all(len(column) == result.iterations for column in result.history.values())
    assert result.history["alpha"][0] == 1.0
    assert "converged" in str(result)


def test_options_validation():
    for bad in (dict(backtrack=1.5), dict(hessian="newton"), dict(max_iter=0), dict(kkt_tol=0.0)):
        with pytest.raises(ValueError):
            SolverOptions(**bad).validate()
    problem = ClosedFormProblem("equality")
    with pytest.raises(ValueError):
        solve(problem, np.zeros(3))


def test_dense_fd_jacobian():
    fun = lambda x: np.array([x[0] ** 2, x[0] * x[1], np.sin(x[1])])
    x = np.array([1.5, -0.7])
    expected = np.array([[3.0, 0.0], [-0.7, 1.5], [0.0, np.cos(-0.7)]])
    assert np.allclose(fd_jacobian(fun, x), expected, atol=1e-8)
    with pytest.raises(ValueError):
        fd_jacobian(fun, x, step=0.0)


def test_sparse_fd_jacobian_on_tridiagonal_pattern():
    n = 10

    def fun(x):
        padded = np.concatenate([[0.0], x, [0.0]])
        return padded[:-2] + 2.0 * x ** 2 + padded[2:]

    pattern = sp.diags([1, 1, 1], [-1, 0, 1], shape=(n, n), dtype=bool)
    assert len(_cpr_groups(sp.csc_matrix(pattern))) == 3
    x = np.linspace(-1.0, 2.0, n)
    expected = sp.diags([np.ones(n - 1), 4.0 * x, np.ones(n - 1)], [-1, 0, 1]).toarray()
    jacobian = fd_jacobian(fun, x, sparsity=pattern)
    assert sp.issparse(jacobian)
    assert np.allclose(jacobian.toarray(), expected, atol=1e-8)


@pytest.mark.slow
def test_small_transcribed_problem():
    from hivopt.defaults import default_initial_state, state_names
    from hivopt.hiv_model import CostParams, ModelParams
    from hivopt.transcribe import build_grid, build_nlp

    X0 = jnp.array([default_initial_state[name] for name in state_names])
    nlp = build_nlp(build_grid(2, 12.0, 3), ModelParams.defaults(), CostParams.defaults(), X0, 2.0e6)
    result = solve(nlp.as_problem(), nlp.initial_guess("simulated"), SolverOptions(max_iter=300))
    assert result.converged, str(result)
    assert np.all(nlp.ineq_constraints(result.x) <= 1e-6)
    schedule, _ = nlp.extract_solution(result.x)
    assert bool(jnp.all(schedule.values >= 0.0))
