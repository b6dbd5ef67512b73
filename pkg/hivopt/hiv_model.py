"""
Risk-structured HIV transmission model with PrEP and TaP enrollment.

All evaluators are pure and vectorised: a state argument is an array whose
last axis holds the nine compartments in the order of
`hivopt.defaults.state_names`

    (S_H, S_L, I_AH, I_AL, I_CH, I_CL, T_H, T_L, P)

and a control argument is an array whose last axis holds (u_P, u_T).
Leading axes broadcast, so a whole collocation grid is evaluated in one call.
Time unit is the month.
"""
import logging
from typing import List, Tuple

import jax
import jax.numpy as jnp
from flax import struct

from hivopt.defaults import (
    default_cost_params,
    default_model_params,
    default_seed,
    state_names,
)

n_states = len(state_names)
n_controls = 2

S_H, S_L, I_AH, I_AL, I_CH, I_CL, T_H, T_L, P = range(n_states)
HIGH_RISK = (S_H, I_AH, I_CH, T_H, P)
LOW_RISK = (S_L, I_AL, I_CL, T_L)


@struct.dataclass
class StateVector:
    """
    Compartment populations (individuals). Deaths are not a state; they are
    accumulated by the oracle as the integral of delta_C * (I_CH + I_CL).
    """
    S_H: float
    S_L: float
    I_AH: float
    I_AL: float
    I_CH: float
    I_CL: float
    T_H: float
    T_L: float
    P: float

    def as_array(self) -> jnp.ndarray:
        return jnp.array([getattr(self, name) for name in state_names], dtype=float)

    @classmethod
    def from_array(cls, X) -> "StateVector":
        X = jnp.asarray(X, dtype=float)
        if X.shape != (n_states,):
            raise ValueError(f"State must be of shape ({n_states},), not {X.shape}")
        return cls(**{name: float(X[i]) for i, name in enumerate(state_names)})

    @property
    def N(self) -> float:
        return float(jnp.sum(self.as_array()))


@struct.dataclass
class ModelParams:
    """
    Epidemiological and treatment parameters.

    Attributes:
        alpha_h, alpha_l: recruitment of high/low-risk susceptibles (individuals/month).
        mu: removal rate for non-HIV reasons (1/month).
        delta_a: acute -> chronic progression rate.
        delta_c: AIDS death rate of chronically infected.
        rho_h: high -> low risk switching rate; rho_l: low -> high.
        prep_dropout: rate at which PrEP fails or is cancelled (x).
        tap_dropout: rate at which TaP fails or is cancelled (y).
        baseline_tap: baseline TaP enrollment rate (v_b, identified with u_T bar).
        lambda_h, lambda_l: contact rates (contacts/month).
        beta_a, beta_c: per-contact transmission probabilities.
        pi_own: probability a contact happens at the own-risk-group site.
        r_b: odds of a high-risk person being in a high-risk environment.
    """
    alpha_h: float
    alpha_l: float
    mu: float
    delta_a: float
    delta_c: float
    rho_h: float
    rho_l: float
    prep_dropout: float
    tap_dropout: float
    baseline_tap: float
    lambda_h: float
    lambda_l: float
    beta_a: float
    beta_c: float
    pi_own: float
    r_b: float

    @classmethod
    def defaults(cls, **overrides) -> "ModelParams":
        values = dict(default_model_params)
        values.update(overrides)
        return cls(**{key: float(val) for key, val in values.items()})

    def validate(self) -> "ModelParams":
        """Raise ValueError naming every offending field."""
        rates = ["alpha_h", "alpha_l", "mu", "delta_a", "delta_c", "rho_h", "rho_l",
                 "prep_dropout", "tap_dropout", "baseline_tap", "lambda_h", "lambda_l"]
        problems = [f"{name}={getattr(self, name)} < 0" for name in rates if getattr(self, name) < 0]
        for name in ["beta_a", "beta_c", "pi_own"]:
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name}={getattr(self, name)} not in [0, 1]")
        if not self.r_b > 0:
            problems.append(f"r_b={self.r_b} must be positive")
        if problems:
            raise ValueError("Invalid model parameters: " + "; ".join(problems))
        return self


@struct.dataclass
class CostParams:
    """
    Budget functional coefficients.

    Attributes:
        tap_treatment: monthly TaP treatment cost per patient.
        prep_treatment: monthly PrEP cost per patient.
        tap_enrollment: cost per sampled individual for TaP enrollment.
        prep_enrollment: cost per sampled individual for PrEP enrollment.
        discount_rate: optional discount of the incidence objective (1/month).
    """
    tap_treatment: float
    prep_treatment: float
    tap_enrollment: float
    prep_enrollment: float
    discount_rate: float = 0.0

    @classmethod
    def defaults(cls, **overrides) -> "CostParams":
        values = dict(default_cost_params)
        values.update(overrides)
        return cls(**{key: float(val) for key, val in values.items()})

    def validate(self) -> "CostParams":
        problems = [f"{name}={getattr(self, name)} < 0"
                    for name in ["tap_treatment", "prep_treatment", "tap_enrollment",
                                 "prep_enrollment", "discount_rate"]
                    if getattr(self, name) < 0]
        if problems:
            raise ValueError("Invalid cost parameters: " + "; ".join(problems))
        return self


@struct.dataclass
class MixingRates:
    theta: jnp.ndarray
    eta_h: jnp.ndarray
    eta_l: jnp.ndarray
    sigma: jnp.ndarray
    tau_h: jnp.ndarray
    tau_l: jnp.ndarray
    psi_h: jnp.ndarray
    psi_l: jnp.ndarray
    phi_h: jnp.ndarray
    phi_l: jnp.ndarray


@struct.dataclass
class EnrollmentFractions:
    zeta_p: jnp.ndarray
    zeta_th: jnp.ndarray
    zeta_tl: jnp.ndarray


def _ratio(num, den):
    """num / den, with the 0/0 -> 0 convention on the closed orthant."""
    positive = den > 0
    return jnp.where(positive, num / jnp.where(positive, den, 1.0), 0.0)


def risk_group_sizes(X) -> Tuple[jnp.ndarray, jnp.ndarray]:
    X = jnp.asarray(X)
    N_H = X[..., S_H] + X[..., I_AH] + X[..., I_CH] + X[..., P] + X[..., T_H]
    N_L = X[..., S_L] + X[..., I_AL] + X[..., I_CL] + X[..., T_L]
    return N_H, N_L


def mixing_rates(X, params: ModelParams) -> MixingRates:
    """
    Per-capita infection rates of high- and low-risk susceptibles.

    Contacts happen at the own-group site with probability pi_own and at the
    common site otherwise; sigma is the per-contact transmission probability
    at the common site.
    """
    X = jnp.asarray(X)
    N_H, N_L = risk_group_sizes(X)
    lam_h, lam_l = params.lambda_h, params.lambda_l
    theta = lam_h * N_H + lam_l * N_L
    eta_h = _ratio(lam_h * N_H, theta)
    eta_l = _ratio(lam_l * N_L, theta)
    infectious_contacts = (
        params.beta_a * (lam_h * X[..., I_AH] + lam_l * X[..., I_AL])
        + params.beta_c * (lam_h * X[..., I_CH] + lam_l * X[..., I_CL])
    )
    sigma = _ratio(infectious_contacts, theta)
    tau_h = (1.0 - params.pi_own) * lam_h * sigma
    tau_l = (1.0 - params.pi_own) * lam_l * sigma
    psi_h = params.pi_own * lam_h * _ratio(params.beta_a * X[..., I_AH] + params.beta_c * X[..., I_CH], N_H)
    psi_l = params.pi_own * lam_l * _ratio(params.beta_a * X[..., I_AL] + params.beta_c * X[..., I_CL], N_L)
    return MixingRates(
        theta=theta, eta_h=eta_h, eta_l=eta_l, sigma=sigma,
        tau_h=tau_h, tau_l=tau_l, psi_h=psi_h, psi_l=psi_l,
        phi_h=psi_h + tau_h, phi_l=psi_l + tau_l,
    )


def enrollment_fractions(X, params: ModelParams) -> EnrollmentFractions:
    """
    Probability that an individual sampled in a high-risk environment is a
    high-risk susceptible (zeta_p) or chronically infected (zeta_th, zeta_tl).
    """
    X = jnp.asarray(X)
    N_H, N_L = risk_group_sizes(X)
    den = params.r_b * N_H + N_L
    return EnrollmentFractions(
        zeta_p=_ratio(params.r_b * X[..., S_H], den),
        zeta_th=_ratio(params.r_b * X[..., I_CH], den),
        zeta_tl=_ratio(X[..., I_CL], den),
    )


def rhs(t, X, u, params: ModelParams) -> jnp.ndarray:
    """
    Right-hand side of the transmission model.

    Args:
        t: Time in months (the model is autonomous).
        X: States, shape (..., 9).
        u: Controls (u_P, u_T), shape (..., 2).
        params: Model parameters.

    Returns:
        Time derivatives, shape (..., 9).
    """
    del t
    X = jnp.asarray(X)
    u = jnp.asarray(u)
    u_p, u_t = u[..., 0], u[..., 1]
    mix = mixing_rates(X, params)
    enr = enrollment_fractions(X, params)
    N = jnp.sum(X, axis=-1)
    p = params
    s_h, s_l, i_ah, i_al, i_ch, i_cl, t_h, t_l, prep = (X[..., k] for k in range(n_states))

    prep_enroll = u_p * enr.zeta_p * N
    tap_enroll_h = u_t * enr.zeta_th * N
    tap_enroll_l = u_t * enr.zeta_tl * N

    derivs = (
        p.alpha_h - (mix.phi_h + p.rho_h + p.mu) * s_h + p.rho_l * s_l + p.prep_dropout * prep - prep_enroll,
        p.alpha_l - (mix.phi_l + p.rho_l + p.mu) * s_l + p.rho_h * (s_h + prep),
        mix.phi_h * s_h - (p.rho_h + p.mu + p.delta_a) * i_ah + p.rho_l * i_al,
        mix.phi_l * s_l - (p.rho_l + p.mu + p.delta_a) * i_al + p.rho_h * i_ah,
        p.delta_a * i_ah - (p.rho_h + p.mu + p.delta_c + p.baseline_tap) * i_ch + p.rho_l * i_cl
        + p.tap_dropout * t_h - tap_enroll_h,
        p.delta_a * i_al - (p.rho_l + p.mu + p.delta_c + p.baseline_tap) * i_cl + p.rho_h * i_ch
        + p.tap_dropout * t_l - tap_enroll_l,
        -(p.tap_dropout + p.rho_h + p.mu) * t_h + p.baseline_tap * i_ch + p.rho_l * t_l + tap_enroll_h,
        -(p.tap_dropout + p.rho_l + p.mu) * t_l + p.baseline_tap * i_cl + p.rho_h * t_h + tap_enroll_l,
        -(p.prep_dropout + p.rho_h + p.mu) * prep + prep_enroll,
    )
    return jnp.stack(jnp.broadcast_arrays(*derivs), axis=-1)


def incidence_cost(X, params: ModelParams) -> jnp.ndarray:
    """New infections per month, S_H * phi_H + S_L * phi_L."""
    X = jnp.asarray(X)
    mix = mixing_rates(X, params)
    return X[..., S_H] * mix.phi_h + X[..., S_L] * mix.phi_l


def incidence_cost_gradient(X, params: ModelParams) -> jnp.ndarray:
    """
    Closed-form gradient of incidence_cost with respect to the nine states.

    With M = lambda_h S_H + lambda_l S_L, Q the infectious contact mass and
    theta the total contact mass, the cost splits into
    pi * lambda_g * S_g * R_g / N_g for both groups plus (1 - pi) * M * Q / theta.
    """
    X = jnp.asarray(X)
    p = params
    lam_h, lam_l = p.lambda_h, p.lambda_l
    N_H, N_L = risk_group_sizes(X)
    zeros = jnp.zeros(X.shape[:-1] + (n_states,), dtype=X.dtype)
    high = zeros.at[..., list(HIGH_RISK)].set(1.0)
    low = zeros.at[..., list(LOW_RISK)].set(1.0)

    def unit(k, scale=1.0):
        return zeros.at[..., k].set(scale)

    # own-site terms
    R_H = p.beta_a * X[..., I_AH] + p.beta_c * X[..., I_CH]
    R_L = p.beta_a * X[..., I_AL] + p.beta_c * X[..., I_CL]
    inv_nh = _ratio(1.0, N_H)[..., None]
    inv_nl = _ratio(1.0, N_L)[..., None]
    own_h = (
        (R_H[..., None] * inv_nh) * unit(S_H)
        + (X[..., S_H, None] * inv_nh) * (unit(I_AH, p.beta_a) + unit(I_CH, p.beta_c))
        - (X[..., S_H] * R_H)[..., None] * inv_nh ** 2 * high
    )
    own_l = (
        (R_L[..., None] * inv_nl) * unit(S_L)
        + (X[..., S_L, None] * inv_nl) * (unit(I_AL, p.beta_a) + unit(I_CL, p.beta_c))
        - (X[..., S_L] * R_L)[..., None] * inv_nl ** 2 * low
    )

    # common-site term
    theta = lam_h * N_H + lam_l * N_L
    M = lam_h * X[..., S_H] + lam_l * X[..., S_L]
    Q = (p.beta_a * (lam_h * X[..., I_AH] + lam_l * X[..., I_AL])
         + p.beta_c * (lam_h * X[..., I_CH] + lam_l * X[..., I_CL]))
    inv_theta = _ratio(1.0, theta)[..., None]
    grad_m = unit(S_H, lam_h) + unit(S_L, lam_l)
    grad_q = (unit(I_AH, p.beta_a * lam_h) + unit(I_AL, p.beta_a * lam_l)
              + unit(I_CH, p.beta_c * lam_h) + unit(I_CL, p.beta_c * lam_l))
    grad_theta = lam_h * high + lam_l * low
    common = (
        Q[..., None] * inv_theta * grad_m
        + M[..., None] * inv_theta * grad_q
        - (M * Q)[..., None] * inv_theta ** 2 * grad_theta
    )
    return p.pi_own * (lam_h * own_h + lam_l * own_l) + (1.0 - p.pi_own) * common


def budget_rate(X, u, costs: CostParams) -> jnp.ndarray:
    """Treatment plus enrollment spending per month."""
    X = jnp.asarray(X)
    u = jnp.asarray(u)
    N = jnp.sum(X, axis=-1)
    return (
        costs.tap_treatment * (X[..., T_H] + X[..., T_L])
        + costs.prep_treatment * X[..., P]
        + costs.tap_enrollment * N * u[..., 1]
        + costs.prep_enrollment * N * u[..., 0]
    )


def discount_factor(t, costs: CostParams) -> jnp.ndarray:
    return jnp.exp(-costs.discount_rate * jnp.asarray(t))


def death_rate(X, params: ModelParams) -> jnp.ndarray:
    X = jnp.asarray(X)
    return params.delta_c * (X[..., I_CH] + X[..., I_CL])


def prevalence(X) -> jnp.ndarray:
    """Share of the population that is infected, treated or not."""
    X = jnp.asarray(X)
    infected = X[..., I_AH] + X[..., I_AL] + X[..., I_CH] + X[..., I_CL] + X[..., T_H] + X[..., T_L]
    return _ratio(infected, jnp.sum(X, axis=-1))


def treated_fraction(X) -> jnp.ndarray:
    """T / (I + T); 1 when nobody is infected, so the map is monotone in the TaP rate."""
    X = jnp.asarray(X)
    treated = X[..., T_H] + X[..., T_L]
    infected = X[..., I_AH] + X[..., I_AL] + X[..., I_CH] + X[..., I_CL] + treated
    return jnp.where(infected > 0, _ratio(treated, infected), 1.0)


class NonnegativityReport:
    """
    Outcome of a randomized essential-nonnegativity check.

    Attributes:
        samples (int): Number of random points drawn (each tested on all nine faces).
        violations (List[Tuple[str, jnp.ndarray, jnp.ndarray, float]]):
            (component, state, control, derivative) witnesses.
    """

    def __init__(self, samples: int, violations: List[Tuple[str, jnp.ndarray, jnp.ndarray, float]]) -> None:
        self.samples = samples
        self.violations = violations

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def __str__(self) -> str:
        if self.ok:
            return f"essentially nonnegative on {self.samples} samples"
        name, X, u, value = self.violations[0]
        return (f"{len(self.violations)} violations in {self.samples} samples; "
                f"first: d{name}/dt = {value:.3e} at X={X}, u={u}")


def check_essential_nonnegativity(
    params: ModelParams,
    samples: int = 10_000,
    seed: int = default_seed,
    state_scale: float = 1e4,
    control_max: float = 0.05,
    tol: float = 0.0,
    max_witnesses: int = 10,
) -> NonnegativityReport:
    """
    Check that rhs_i(X, u) >= 0 whenever X >= 0, X_i = 0 and u >= 0.

    Each random state is tested on every face X_i = 0. A third of the other
    components are zeroed as well so that lower-dimensional faces (an empty
    risk group, no infecteds) are visited. Violations are reported, not raised.
    """
    key = jax.random.PRNGKey(seed)
    key_x, key_mask, key_u = jax.random.split(key, 3)
    X = jax.random.uniform(key_x, (samples, n_states), maxval=state_scale)
    keep = jax.random.uniform(key_mask, (samples, n_states)) > 1.0 / 3.0
    X = jnp.where(keep, X, 0.0)
    u = jax.random.uniform(key_u, (samples, n_controls), maxval=control_max)

    faces = jnp.broadcast_to(X[:, None, :], (samples, n_states, n_states))
    faces = faces * (1.0 - jnp.eye(n_states))[None, :, :]
    derivs = rhs(0.0, faces, u[:, None, :], params)
    on_face = jnp.diagonal(derivs, axis1=1, axis2=2)    # (samples, n_states)

    bad = jnp.argwhere(on_face < -tol)
    violations = []
    for sample, component in bad[:max_witnesses].tolist():
        violations.append((state_names[component], faces[sample, component], u[sample],
                           float(on_face[sample, component])))
    if bad.shape[0] > 0:
        logging.warning(msg=f"Essential nonnegativity violated at {bad.shape[0]} sample faces.")
    return NonnegativityReport(samples=samples, violations=violations)
