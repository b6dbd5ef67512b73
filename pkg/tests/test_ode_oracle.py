import pytest
from context import hivopt

import jax
import jax.numpy as jnp
import numpy as np
import scipy.optimize

from hivopt.defaults import default_initial_state, state_names
from hivopt.hiv_model import CostParams, ModelParams, rhs
from hivopt.ode_oracle import (
    CalibrationError,
    ControlSchedule,
    calibrate,
    endemic_equilibrium,
    evaluate_policy,
    integrate,
    saturating_schedule,
)
from hivopt.transcribe import build_grid, build_nlp, solve_dynamics

X0 = np.array([default_initial_state[name] for name in state_names])

zero_rates = {name: 0.0 for name in ("alpha_h", "alpha_l", "mu", "delta_a", "delta_c", "rho_h", "rho_l",
                                     "prep_dropout", "tap_dropout", "baseline_tap", "lambda_h", "lambda_l",
                                     "beta_a", "beta_c", "pi_own")}


def test_schedule_is_right_continuous():
    schedule = ControlSchedule(dt=12.0, values=jnp.array([[1.0, 2.0], [3.0, 4.0]])).validate()
    assert jnp.array_equal(schedule.at(12.0), jnp.array([3.0, 4.0]))
    assert jnp.array_equal(schedule.at(11.999), jnp.array([1.0, 2.0]))
    assert jnp.array_equal(schedule.at(30.0), jnp.array([3.0, 4.0]))
    assert jnp.array_equal(schedule.at(-1.0), jnp.array([1.0, 2.0]))
    assert schedule.t_f == 24.0
    with pytest.raises(ValueError):
        ControlSchedule(dt=12.0, values=jnp.array([[-1.0, 0.0]])).validate()
    with pytest.raises(ValueError):
        ControlSchedule(dt=0.0, values=jnp.zeros((1, 2))).validate()


def test_constant_trajectory_without_rates():
    X = np.asarray(jax.random.uniform(jax.random.PRNGKey(0), (9,), maxval=1e4))
    trajectory = integrate(ModelParams.defaults(**zero_rates), X, ControlSchedule.zeros(2, 12.0))
    assert np.allclose(trajectory.states(np.linspace(0.0, 24.0, 7)), X[None, :], rtol=1e-12)
    assert trajectory.n_restarts == 2


def test_pure_mortality_decays_exponentially():
    mu = 1.0 / 360.0
    params = ModelParams.defaults(**{**zero_rates, "mu": mu})
    trajectory = integrate(params, X0, ControlSchedule.zeros(2, 12.0), rel_tol=1e-11, abs_tol=1e-9)
    assert np.allclose(trajectory.final_state, X0 * np.exp(-24.0 * mu), rtol=1e-8)


def test_population_balance_without_background_mortality():
    params = ModelParams.defaults(mu=0.0)
    trajectory = integrate(params, X0, ControlSchedule.constant(3, 12.0, 2e-3, 1e-3), rel_tol=1e-11, abs_tol=1e-9)
    gained = np.sum(trajectory.final_state) - np.sum(X0)
    expected = (params.alpha_h + params.alpha_l) * 36.0 - trajectory.total("deaths")
    assert gained == pytest.approx(expected, rel=1e-7)


def test_restarts_do_not_change_the_solution():
    params = ModelParams.defaults()
    split = integrate(params, X0, ControlSchedule.constant(3, 12.0, 1e-3, 1e-3), rel_tol=1e-11, abs_tol=1e-9)
    single = integrate(params, X0, ControlSchedule.constant(1, 36.0, 1e-3, 1e-3), rel_tol=1e-11, abs_tol=1e-9)
    assert np.allclose(split.final_state, single.final_state, rtol=1e-8)
    assert split.total("incidence") == pytest.approx(single.total("incidence"), rel=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_random_runs_stay_nonnegative(seed):
    key_x, key_u = jax.random.split(jax.random.PRNGKey(seed))
    X = np.asarray(jax.random.uniform(key_x, (9,), maxval=2e4))
    values = jax.random.uniform(key_u, (4, 2), maxval=0.01)
    trajectory = integrate(ModelParams.defaults(), X, ControlSchedule(dt=6.0, values=values).validate())
    assert trajectory.min_state >= -1e-6 * np.sum(X)


def test_tightening_tolerances_converges():
    params = ModelParams.defaults()
    schedule = ControlSchedule.constant(2, 12.0, 1e-3, 2e-3)
    reference = integrate(params, X0, schedule, rel_tol=1e-12, abs_tol=1e-10).final_state
    errors = [np.max(np.abs(integrate(params, X0, schedule, rel_tol=tol, abs_tol=tol).final_state - reference))
              for tol in (1e-5, 1e-8)]
    assert errors[1] < errors[0]
    assert errors[1] <= 1e-5 * np.sum(X0)


def test_zero_schedule_spends_nothing_extra():
    evaluation = evaluate_policy(ModelParams.defaults(), CostParams.defaults(), X0, ControlSchedule.zeros(3, 12.0), 1e5)
    assert np.allclose(evaluation.excess, 0.0, atol=1e-6 * max(1.0, float(np.max(evaluation.baseline_spend))))
    assert evaluation.all_feasible
    assert evaluation.n_int == 3


def test_no_infecteds_no_cost():
    X = X0.copy()
    X[2:8] = 0.0
    evaluation = evaluate_policy(ModelParams.defaults(), CostParams.defaults(), X, ControlSchedule.constant(2, 12.0, 1e-3, 1e-3), 1e5)
    assert evaluation.total_cost == 0.0
    assert evaluation.total_incidence == 0.0


def test_budget_integral_matches_transcription():
    params, costs = ModelParams.defaults(), CostParams.defaults()
    budget_limit = 1e6
    schedule = ControlSchedule.constant(1, 12.0, 2e-3, 1e-3)
    nlp = build_nlp(build_grid(1, 12.0, 5), params, costs, X0, budget_limit)
    transcribed = (nlp.ineq_constraints(solve_dynamics(nlp, schedule))[0] + 1.0) * budget_limit
    oracle = evaluate_policy(params, costs, X0, schedule, budget_limit, rel_tol=1e-11, abs_tol=1e-9).excess[0]
    assert transcribed == pytest.approx(oracle, rel=1e-5)


def test_invalid_inputs():
    schedule = ControlSchedule.zeros(1, 12.0)
    with pytest.raises(ValueError):
        integrate(ModelParams.defaults(), -X0, schedule)
    with pytest.raises(ValueError):
        integrate(ModelParams.defaults(), X0[:8], schedule)
    with pytest.raises(ValueError):
        integrate(ModelParams.defaults(), X0, schedule, rel_tol=0.0)
    with pytest.raises(ValueError):
        integrate(ModelParams.defaults(), X0, schedule, span=(5.0, 5.0))


def test_endemic_equilibrium_is_stationary():
    params = ModelParams.defaults()
    X = endemic_equilibrium(params)
    assert np.all(X >= 0.0)
    assert float(jnp.max(jnp.abs(rhs(0.0, X, jnp.zeros(2), params)))) <= 1e-8 * np.sum(X)


def test_saturating_schedules():
    params, costs = ModelParams.defaults(), CostParams.defaults()
    grid = ControlSchedule.zeros(2, 12.0)
    schedule = saturating_schedule(params, costs, X0, grid, 1e5, "prep")
    assert np.all(np.asarray(schedule.values[:, 0]) > 0) and np.all(np.asarray(schedule.values[:, 1]) == 0)
    evaluation = evaluate_policy(params, costs, X0, schedule, 1e5)
    assert np.allclose(evaluation.excess / 1e5, 1.0, atol=1e-5)

    idle = saturating_schedule(params, costs, X0, grid, 0.0, "tap")
    assert jnp.all(idle.values == 0.0)
    with pytest.raises(ValueError):
        saturating_schedule(params, costs, X0, grid, 1e5, "both")


@pytest.mark.slow
def test_calibration_without_transmission_fails():
    with pytest.raises(CalibrationError):
        calibrate(ModelParams.defaults(beta_a=0.0, beta_c=0.0))


@pytest.mark.slow
def test_calibration_hits_targets():
    result = calibrate(ModelParams.defaults())
    assert result.prevalence == pytest.approx(0.20, abs=1e-3)
    assert result.treated_fraction == pytest.approx(0.25, abs=1e-3)
    assert result.params.lambda_h == pytest.approx(10.0 * result.params.lambda_l)


def endemic_balance(params, prevalence_target=0.20, treated_target=0.25, contact_ratio=10.0):
    """(lambda_L, baseline_tap) from the steady-state balance without risk switching or own-site mixing."""
    mu, d_a, d_c = params.mu, params.delta_a, params.delta_c
    tap = (mu + d_a + d_c) / (d_a * (1.0 - treated_target) / (treated_target * mu) - 1.0)
    # compartment masses per unit of new infections
    acute = 1.0 / (mu + d_a)
    chronic = d_a * acute / (mu + d_c + tap)
    infected = acute + chronic + tap * chronic / mu
    infectious = params.beta_a * acute + params.beta_c * chronic

    def groups(phi_l):
        S_H = params.alpha_h / (contact_ratio * phi_l + mu)
        S_L = params.alpha_l / (phi_l + mu)
        new_h, new_l = contact_ratio * phi_l * S_H, phi_l * S_L
        N_H = (params.alpha_h - d_c * chronic * new_h) / mu
        N_L = (params.alpha_l - d_c * chronic * new_l) / mu
        return S_H, S_L, N_H, N_L, infected * (new_h + new_l)

    def gap(phi_l):
        _, _, N_H, N_L, total = groups(phi_l)
        return total / (N_H + N_L) - prevalence_target

    S_H, S_L, N_H, N_L, _ = groups(scipy.optimize.brentq(gap, 1e-8, 1.0, xtol=1e-14))
    lambda_l = (contact_ratio * N_H + N_L) / (infectious * (contact_ratio ** 2 * S_H + S_L))
    return lambda_l, tap


@pytest.mark.slow
def test_calibrated_rates_match_endemic_balance():
    params = ModelParams.defaults()
    lambda_l, tap = endemic_balance(params)
    assert tap == pytest.approx(0.000993, rel=1e-3)
    result = calibrate(params)
    assert result.params.lambda_l == pytest.approx(lambda_l, rel=2e-3)
    assert result.params.baseline_tap == pytest.approx(tap, rel=2e-3)
    # the published pair (4.09, 0.00148) puts about a third of the infected on treatment here
    assert result.params.baseline_tap < 0.9 * params.baseline_tap
