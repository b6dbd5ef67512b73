import pytest
from context import hivopt

import jax
import jax.numpy as jnp
from hypothesis import given, settings, strategies as st

from hivopt.hiv_model import (
    CostParams,
    ModelParams,
    StateVector,
    budget_rate,
    check_essential_nonnegativity,
    enrollment_fractions,
    incidence_cost,
    incidence_cost_gradient,
    mixing_rates,
    prevalence,
    rhs,
    treated_fraction,
    I_CH,
    I_CL,
)


def random_states(key, n=16, scale=1e4):
    return jax.random.uniform(key, (n, 9), minval=0.0, maxval=scale)


def test_zero_rates_give_constant_state():
    zero = {name: 0.0 for name in ("alpha_h", "alpha_l", "mu", "delta_a", "delta_c", "rho_h", "rho_l",
                                   "prep_dropout", "tap_dropout", "baseline_tap", "lambda_h", "lambda_l",
                                   "beta_a", "beta_c", "pi_own")}
    params = ModelParams.defaults(**zero)
    X = random_states(jax.random.PRNGKey(0))
    derivs = rhs(0.0, X, jnp.zeros((16, 2)), params)
    assert jnp.allclose(derivs, 0.0)


def test_population_balance():
    params = ModelParams.defaults(rho_h=0.01, rho_l=0.002, prep_dropout=1 / 12, tap_dropout=0.01, pi_own=0.4)
    key_x, key_u = jax.random.split(jax.random.PRNGKey(1))
    X = random_states(key_x)
    u = jax.random.uniform(key_u, (16, 2), maxval=0.01)
    total = jnp.sum(rhs(0.0, X, u, params), axis=-1)
    expected = (params.alpha_h + params.alpha_l - params.mu * jnp.sum(X, axis=-1)
                - params.delta_c * (X[:, I_CH] + X[:, I_CL]))
    assert jnp.allclose(total, expected, rtol=1e-12, atol=1e-8)


def test_empty_population_is_finite():
    params = ModelParams.defaults(pi_own=0.5)
    derivs = rhs(0.0, jnp.zeros(9), jnp.array([0.01, 0.01]), params)
    assert jnp.all(jnp.isfinite(derivs))
    assert derivs[0] == pytest.approx(params.alpha_h)
    assert derivs[1] == pytest.approx(params.alpha_l)
    assert float(incidence_cost(jnp.zeros(9), params)) == 0.0


@pytest.mark.parametrize("pi_own", [0.0, 0.3, 1.0])
def test_incidence_gradient_matches_autodiff(pi_own):
    params = ModelParams.defaults(pi_own=pi_own)
    X = random_states(jax.random.PRNGKey(2), n=8) + 1.0
    auto = jax.vmap(jax.grad(lambda x: incidence_cost(x, params)))(X)
    closed = incidence_cost_gradient(X, params)
    assert jnp.allclose(closed, auto, rtol=1e-10, atol=1e-14)


def test_no_infecteds_no_incidence():
    X = jnp.array([9800.0, 89850.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 350.0])
    assert float(incidence_cost(X, ModelParams.defaults())) == 0.0


def test_essential_nonnegativity_published_parameters():
    report = check_essential_nonnegativity(ModelParams.defaults())
    assert report.ok, str(report)
    assert report.samples == 10_000


def test_essential_nonnegativity_with_switching_and_mixing():
    params = ModelParams.defaults(rho_h=0.02, rho_l=0.005, pi_own=0.6, prep_dropout=1 / 24, tap_dropout=0.02)
    report = check_essential_nonnegativity(params, samples=2000, seed=3)
    assert report.ok, str(report)


def test_prevalence_and_treated_fraction():
    X = StateVector(S_H=10.0, S_L=60.0, I_AH=5.0, I_AL=5.0, I_CH=5.0, I_CL=0.0, T_H=5.0, T_L=0.0, P=10.0).as_array()
    assert float(prevalence(X)) == pytest.approx(0.2)
    assert float(treated_fraction(X)) == pytest.approx(0.25)
    assert float(treated_fraction(jnp.array([1.0, 1.0, 0, 0, 0, 0, 0, 0, 0]))) == 1.0


def test_budget_rate_without_treatment_or_controls():
    X = jnp.array([9800.0, 89850.0, 100.0, 50.0, 150.0, 50.0, 0.0, 0.0, 0.0])
    assert float(budget_rate(X, jnp.zeros(2), CostParams.defaults())) == 0.0
    spend = float(budget_rate(X, jnp.array([0.001, 0.0]), CostParams.defaults()))
    assert spend == pytest.approx(213.0 * 0.001 * float(jnp.sum(X)))


def test_common_site_mixing_example():
    X = StateVector(S_H=90.0, S_L=0.0, I_AH=10.0, I_AL=0.0, I_CH=0.0, I_CL=0.0, T_H=0.0, T_L=0.0, P=0.0).as_array()
    params = ModelParams.defaults(pi_own=0.0)
    mix = mixing_rates(X, params)
    assert float(mix.sigma) == pytest.approx(0.0015, rel=1e-12)
    assert float(mix.phi_h) == pytest.approx(0.06135, rel=1e-12)
    assert float(incidence_cost(X, params)) == pytest.approx(5.5215, rel=1e-12)


def test_within_group_mixing():
    X = jnp.array([50.0, 80.0, 4.0, 2.0, 6.0, 3.0, 5.0, 5.0, 10.0])
    params = ModelParams.defaults(pi_own=1.0)
    mix = mixing_rates(X, params)
    N_H = 50.0 + 4.0 + 6.0 + 5.0 + 10.0
    expected = params.lambda_h * (params.beta_a * 4.0 + params.beta_c * 6.0) / N_H
    assert float(mix.phi_h) == pytest.approx(expected, rel=1e-12)


def test_contact_shares_sum_to_one():
    X = random_states(jax.random.PRNGKey(5), n=32) + 1.0
    mix = mixing_rates(X, ModelParams.defaults(pi_own=0.3))
    assert jnp.allclose(mix.eta_h + mix.eta_l, 1.0, rtol=0.0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2 ** 16), scale=st.floats(min_value=1e-3, max_value=1e3))
def test_infection_rates_are_scale_invariant(seed, scale):
    params = ModelParams.defaults(pi_own=0.3)
    X = random_states(jax.random.PRNGKey(seed), n=4) + 1.0
    base, scaled = mixing_rates(X, params), mixing_rates(scale * X, params)
    assert jnp.allclose(scaled.phi_h, base.phi_h, rtol=1e-10)
    assert jnp.allclose(scaled.phi_l, base.phi_l, rtol=1e-10)


def test_enrollment_fraction_example():
    X = StateVector(S_H=20.0, S_L=50.0, I_AH=30.0, I_AL=0.0, I_CH=0.0, I_CL=0.0, T_H=0.0, T_L=0.0, P=0.0).as_array()
    fractions = enrollment_fractions(X, ModelParams.defaults(r_b=4.0))
    assert float(fractions.zeta_p) == pytest.approx(0.32, rel=1e-12)
    uniform = enrollment_fractions(X, ModelParams.defaults(r_b=1.0))
    assert float(uniform.zeta_p) == pytest.approx(20.0 / 100.0, rel=1e-12)
    empty = enrollment_fractions(jnp.zeros(9), ModelParams.defaults())
    assert float(empty.zeta_p) == 0.0 and float(empty.zeta_tl) == 0.0


def test_budget_rate_example():
    X = StateVector(S_H=0.0, S_L=850.0, I_AH=0.0, I_AL=0.0, I_CH=0.0, I_CL=0.0, T_H=60.0, T_L=40.0, P=50.0).as_array()
    spend = float(budget_rate(X, jnp.array([0.002, 0.001]), CostParams.defaults()))
    assert spend == pytest.approx(129900.0 + 38800.0 + 266.0 + 426.0, rel=1e-12)
    assert spend == pytest.approx(169392.0, rel=1e-12)


def test_state_vector_from_array():
    X = jnp.arange(9.0)
    state = StateVector.from_array(X)
    assert state.I_AH == 2.0 and state.P == 8.0
    assert state.N == pytest.approx(36.0)
    with pytest.raises(ValueError):
        StateVector.from_array(jnp.zeros(8))


def test_invalid_parameters_are_named():
    with pytest.raises(ValueError, match="mu"):
        ModelParams.defaults(mu=-1.0).validate()
    with pytest.raises(ValueError, match="beta_a"):
        ModelParams.defaults(beta_a=1.5).validate()
    with pytest.raises(ValueError, match="prep_enrollment"):
        CostParams.defaults(prep_enrollment=-1.0).validate()
