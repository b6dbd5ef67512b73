"""
Adaptive reference integration of the transmission model.

The oracle is deliberately independent of the collocation transcription:
it integrates the model with an embedded Dormand-Prince 5(4) pair, restarts
at every control knot, and carries four running integrals next to the nine
compartments:

    cost       discounted incidence, the objective J^C
    spend      budget rate B(X, u)
    deaths     delta_C * (I_CH + I_CL)
    incidence  undiscounted new infections
"""
import logging
from typing import Callable, List, Optional, Tuple

import jax
import jax.numpy as jnp
import jaxopt
import numpy as np
import scipy.integrate as integ
import scipy.optimize as opt
from flax import struct
from typing_extensions import Literal

from hivopt.defaults import (
    default_abs_tol,
    default_contact_ratio,
    default_equilibrium_horizon,
    default_equilibrium_tol,
    default_initial_state,
    default_lambda_box,
    default_prevalence_target,
    default_rel_tol,
    default_tap_box,
    default_treated_target,
    state_names,
)
from hivopt.hiv_model import (
    CostParams,
    ModelParams,
    budget_rate,
    death_rate,
    discount_factor,
    incidence_cost,
    n_controls,
    n_states,
    prevalence,
    rhs,
    treated_fraction,
)

quadrature_names = ("cost", "spend", "deaths", "incidence")


class IntegrationError(RuntimeError):
    """The adaptive integrator gave up; `t` is where the step size underflowed."""

    def __init__(self, t: float, message: str = "") -> None:
        self.t = float(t)
        super().__init__(f"Integration failed at t={self.t:.6g}: {message}")


class CalibrationError(RuntimeError):
    pass


class EquilibriumError(RuntimeError):
    pass


@struct.dataclass
class ControlSchedule:
    """
    Piecewise-constant controls: interval i covers [t0 + i*dt, t0 + (i+1)*dt)
    and carries values[i] = (u_P, u_T). Right-continuous at the knots; times
    past the last knot keep the last value.
    """
    dt: float
    values: jnp.ndarray
    t0: float = 0.0

    @property
    def n_int(self) -> int:
        return int(self.values.shape[0])

    @property
    def t_f(self) -> float:
        return self.t0 + self.n_int * self.dt

    @property
    def knots(self) -> jnp.ndarray:
        return self.t0 + self.dt * jnp.arange(self.n_int + 1)

    @classmethod
    def constant(cls, n_int: int, dt: float, u_p: float = 0.0, u_t: float = 0.0, t0: float = 0.0) -> "ControlSchedule":
        values = jnp.tile(jnp.array([u_p, u_t], dtype=float), (n_int, 1))
        return cls(dt=float(dt), values=values, t0=float(t0)).validate()

    @classmethod
    def zeros(cls, n_int: int, dt: float, t0: float = 0.0) -> "ControlSchedule":
        return cls.constant(n_int, dt, 0.0, 0.0, t0)

    def validate(self) -> "ControlSchedule":
        if self.values.ndim != 2 or self.values.shape[1] != n_controls:
            raise ValueError(f"Schedule values must be of shape (n_int, {n_controls}), not {self.values.shape}")
        if not self.dt > 0:
            raise ValueError(f"Interval length must be positive, got {self.dt}")
        if bool(jnp.any(self.values < 0)):
            raise ValueError("Control schedule has negative entries")
        return self

    def interval_index(self, t) -> jnp.ndarray:
        # knots computed as t0 + i * dt must land in interval i despite rounding
        i = jnp.floor((jnp.asarray(t, dtype=float) - self.t0) / self.dt + 1e-9).astype(int)
        return jnp.clip(i, 0, self.n_int - 1)

    def at(self, t) -> jnp.ndarray:
        return self.values[self.interval_index(t)]


@jax.jit
def _augmented_rhs(t, y, u, params: ModelParams, costs: CostParams):
    X = y[:n_states]
    cost = incidence_cost(X, params)
    extra = jnp.stack([
        discount_factor(t, costs) * cost,
        budget_rate(X, u, costs),
        death_rate(X, params),
        cost,
    ])
    return jnp.concatenate([rhs(t, X, u, params), extra])


_state_jacobian = jax.jit(jax.jacfwd(lambda X, u, params: rhs(0.0, X, u, params)))


class Trajectory:
    """
    Dense solution assembled from one solve_ivp run per control interval.

    Attributes:
        t (np.ndarray): Accepted step times, strictly increasing.
        y (np.ndarray): Augmented states at t, shape (len(t), 13).
        nfev (int): Right-hand side evaluations.
        n_restarts (int): Number of integration segments.
    """

    def __init__(self, segments: List[Tuple[float, float, Callable]], t: np.ndarray, y: np.ndarray, nfev: int) -> None:
        self._segments = segments
        self._ends = np.array([end for _, end, _ in segments])
        self.t = t
        self.y = y
        self.nfev = nfev
        self.n_restarts = len(segments)

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def _augmented(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t)
        if np.any(flat < self.t_start - 1e-9) or np.any(flat > self.t_end + 1e-9):
            raise ValueError(f"Requested times outside [{self.t_start}, {self.t_end}]")
        # right-continuous segment lookup; the last segment also owns t_end
        idx = np.minimum(np.searchsorted(self._ends, flat, side="right"), len(self._segments) - 1)
        out = np.empty((flat.shape[0], self.y.shape[1]))
        for seg in np.unique(idx):
            mask = idx == seg
            out[mask] = self._segments[seg][2](flat[mask]).T
        return out.reshape(t.shape + (self.y.shape[1],))

    def states(self, t) -> np.ndarray:
        """Compartments at t, shape t.shape + (9,)."""
        return self._augmented(t)[..., :n_states]

    def __call__(self, t) -> np.ndarray:
        return self.states(t)

    def quadrature(self, name: str, t) -> np.ndarray:
        """Running integral `name` (one of quadrature_names) from t_start to t."""
        return self._augmented(t)[..., n_states + quadrature_names.index(name)]

    def total(self, name: str) -> float:
        return float(self.y[-1, n_states + quadrature_names.index(name)] - self.y[0, n_states + quadrature_names.index(name)])

    @property
    def min_state(self) -> float:
        return float(np.min(self.y[:, :n_states]))

    @property
    def final_state(self) -> np.ndarray:
        return self.y[-1, :n_states]


def integrate(
    params: ModelParams,
    X0,
    schedule: ControlSchedule,
    span: Optional[Tuple[float, float]] = None,
    rel_tol: float = default_rel_tol,
    abs_tol: float = default_abs_tol,
    costs: Optional[CostParams] = None,
    max_step: float = np.inf,
) -> Trajectory:
    """
    Integrate the model under a piecewise-constant schedule.

    Args:
        params: Model parameters.
        X0: Initial compartments (9,), nonnegative.
        schedule: Controls; knots inside the span restart the integrator.
        span: (t_start, t_end), defaults to the schedule's own horizon.
        rel_tol, abs_tol: Local error tolerances.
        costs: Budget coefficients for the spend quadrature (defaults if omitted).
        max_step: Upper bound on the step size.

    Raises:
        IntegrationError: On step-size underflow.
    """
    if not (rel_tol > 0 and abs_tol > 0):
        raise ValueError(f"Tolerances must be positive, got rel_tol={rel_tol}, abs_tol={abs_tol}")
    X0 = np.asarray(X0, dtype=float)
    if X0.shape != (n_states,):
        raise ValueError(f"X0 must be of shape ({n_states},), not {X0.shape}")
    if np.any(X0 < 0):
        raise ValueError(f"X0 must be nonnegative, got {X0}")
    costs = CostParams.defaults() if costs is None else costs
    t_start, t_end = (schedule.t0, schedule.t_f) if span is None else (float(span[0]), float(span[1]))
    if not t_end > t_start:
        raise ValueError(f"Empty integration span ({t_start}, {t_end})")

    knots = np.asarray(schedule.knots)
    breaks = np.concatenate([[t_start], knots[(knots > t_start) & (knots < t_end)], [t_end]])

    y = np.concatenate([X0, np.zeros(len(quadrature_names))])
    segments, ts, ys, nfev = [], [np.array([t_start])], [y[None, :]], 0
    for a, b in zip(breaks[:-1], breaks[1:]):
        u = schedule.at(a)
        sol = integ.solve_ivp(
            lambda t, state: np.asarray(_augmented_rhs(t, state, u, params, costs)),
            (a, b),
            y,
            method="RK45",
            rtol=rel_tol,
            atol=abs_tol,
            dense_output=True,
            max_step=max_step,
        )
        nfev += sol.nfev
        if sol.status != 0:
            raise IntegrationError(sol.t[-1], sol.message)
        segments.append((a, b, sol.sol))
        ts.append(sol.t[1:])
        ys.append(sol.y[:, 1:].T)
        y = sol.y[:, -1]

    trajectory = Trajectory(segments, np.concatenate(ts), np.concatenate(ys), nfev)
    if trajectory.min_state < -10 * abs_tol:
        logging.warning(msg=f"State dipped to {trajectory.min_state:.3e} during integration.")
    return trajectory


def baseline_trajectories(
    params: ModelParams,
    controlled: Trajectory,
    grid,
    rel_tol: float = default_rel_tol,
    abs_tol: float = default_abs_tol,
    costs: Optional[CostParams] = None,
) -> List[Trajectory]:
    """
    Zero-control counterfactual per interval, started from the controlled
    trajectory's state at the interval's left knot. `grid` needs n_int, dt, t0.
    """
    baselines = []
    for i in range(grid.n_int):
        a = grid.t0 + i * grid.dt
        schedule = ControlSchedule.zeros(1, grid.dt, t0=a)
        baselines.append(integrate(params, np.maximum(controlled(a), 0.0), schedule,
                                   rel_tol=rel_tol, abs_tol=abs_tol, costs=costs))
    return baselines


class PolicyEvaluation:
    """
    Re-simulated objective and budget use of a schedule.

    Attributes:
        total_cost: J^C, discounted if the cost parameters say so.
        spend: Controlled spend per interval.
        baseline_spend: Zero-control spend per interval.
        excess: spend - baseline_spend.
        feasible: Per-interval excess <= B_lim * (1 + budget_rtol).
        cumulative_deaths: Integrated AIDS deaths over the horizon.
        total_incidence: Undiscounted new infections over the horizon.
        terminal_incidence: Incidence rate at t_f.
    """

    def __init__(self, trajectory: Trajectory, baselines: List[Trajectory], budget_limit: float,
                 params: ModelParams, budget_rtol: float) -> None:
        self.trajectory = trajectory
        self.baselines = baselines
        self.budget_limit = float(budget_limit)
        n_int = len(baselines)
        edges = np.array([b.t_start for b in baselines] + [baselines[-1].t_end])
        running = trajectory.quadrature("spend", edges)
        self.spend = np.diff(running)
        self.baseline_spend = np.array([b.total("spend") for b in baselines])
        self.excess = self.spend - self.baseline_spend
        self.feasible = self.excess <= self.budget_limit * (1.0 + budget_rtol) + 1e-9 * np.maximum(self.baseline_spend, 1.0)
        self.total_cost = trajectory.total("cost")
        self.cumulative_deaths = trajectory.total("deaths")
        self.total_incidence = trajectory.total("incidence")
        self.terminal_incidence = float(incidence_cost(trajectory.final_state, params))
        self.n_int = n_int

    @property
    def all_feasible(self) -> bool:
        return bool(np.all(self.feasible))

    @property
    def max_excess_ratio(self) -> float:
        if self.budget_limit > 0:
            return float(np.max(self.excess) / self.budget_limit)
        return float(np.max(self.excess))

    def __str__(self) -> str:
        return (f"J^C={self.total_cost:.6g}, new infections={self.total_incidence:.6g}, "
                f"deaths={self.cumulative_deaths:.6g}, infeasible intervals={int(np.sum(~self.feasible))}")


def evaluate_policy(
    params: ModelParams,
    costs: CostParams,
    X0,
    schedule: ControlSchedule,
    budget_limit: float,
    rel_tol: float = default_rel_tol,
    abs_tol: float = default_abs_tol,
    budget_rtol: float = 1e-4,
) -> PolicyEvaluation:
    """Integrate a schedule with its per-interval baselines and score it."""
    trajectory = integrate(params, X0, schedule, rel_tol=rel_tol, abs_tol=abs_tol, costs=costs)
    baselines = baseline_trajectories(params, trajectory, schedule, rel_tol=rel_tol, abs_tol=abs_tol, costs=costs)
    evaluation = PolicyEvaluation(trajectory, baselines, budget_limit, params, budget_rtol)
    if not evaluation.all_feasible:
        logging.warning(msg=f"Schedule exceeds the budget in {int(np.sum(~evaluation.feasible))} intervals "
                            f"(max excess ratio {evaluation.max_excess_ratio:.6f}).")
    return evaluation


def endemic_equilibrium(
    params: ModelParams,
    seed_state=None,
    horizon: float = default_equilibrium_horizon,
    tol: float = default_equilibrium_tol,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-8,
) -> np.ndarray:
    """
    Zero-control steady state reached from seed_state.

    Integrates for `horizon` months and accepts the end state when
    max |rhs| <= tol * N; otherwise polishes it with a Newton-type root
    solve on the right-hand side.

    Raises:
        EquilibriumError: If neither integration nor polishing meets the test.
    """
    seed = np.array([default_initial_state[name] for name in state_names]) if seed_state is None else np.asarray(seed_state, dtype=float)
    schedule = ControlSchedule.zeros(1, horizon)
    X = integrate(params, seed, schedule, rel_tol=rel_tol, abs_tol=abs_tol).final_state
    zero_u = jnp.zeros(n_controls)

    def residual(state) -> float:
        return float(jnp.max(jnp.abs(rhs(0.0, state, zero_u, params))))

    N = float(np.sum(X))
    if residual(X) <= tol * N:
        return X

    logging.debug(msg=f"Polishing equilibrium, integration residual {residual(X):.3e}.")
    solution = opt.root(
        lambda state: np.asarray(rhs(0.0, state, zero_u, params)),
        X,
        jac=lambda state: np.asarray(_state_jacobian(state, zero_u, params)),
        method="hybr",
        options={"xtol": 1e-14},
    )
    polished = solution.x
    N = float(np.sum(polished))
    if not (np.all(polished >= -tol * N) and residual(polished) <= tol * N):
        raise EquilibriumError(f"No equilibrium reached from the seed state: residual {residual(polished):.3e}, "
                               f"min component {np.min(polished):.3e}")
    return np.maximum(polished, 0.0)


def _bisect(fun: Callable[[float], float], lower: float, upper: float, tol: float, maxiter: int, what: str) -> Tuple[float, int]:
    """Root of a monotone scalar function in [lower, upper] by jaxopt bisection."""
    f_low, f_up = fun(lower), fun(upper)
    if f_low == 0.0:
        return lower, 0
    if f_up == 0.0:
        return upper, 0
    if np.sign(f_low) == np.sign(f_up):
        raise CalibrationError(f"No sign change for {what} in [{lower}, {upper}]: values {f_low:.4g}, {f_up:.4g}")
    solver = jaxopt.Bisection(
        optimality_fun=lambda v: jnp.asarray(fun(float(v))),
        lower=lower,
        upper=upper,
        tol=tol,
        maxiter=maxiter,
        check_bracket=False,
        jit=False,
        unroll=True,
    )
    params, state = solver.run()
    return float(params), int(state.iter_num)


@struct.dataclass
class CalibrationResult:
    params: ModelParams
    equilibrium: jnp.ndarray
    prevalence: float
    treated_fraction: float
    iterations: int


def calibrate(
    params: ModelParams,
    prevalence_target: float = default_prevalence_target,
    treated_target: float = default_treated_target,
    contact_ratio: float = default_contact_ratio,
    lambda_box: Tuple[float, float] = default_lambda_box,
    tap_box: Tuple[float, float] = default_tap_box,
    seed_state=None,
    tol: float = 1e-7,
    maxiter: int = 80,
    accept_tol: float = 1e-3,
) -> CalibrationResult:
    """
    Fit (lambda_L, baseline_tap) to the endemic targets with lambda_H = contact_ratio * lambda_L.

    Outer bisection on lambda_L for the equilibrium prevalence; for every
    trial lambda_L an inner bisection on baseline_tap hits the treated
    fraction T / (I + T).

    Raises:
        CalibrationError: If no endemic equilibrium with the targets exists in the box.
    """
    seeds = {"state": seed_state}
    evaluations = {"count": 0}

    def variant(lambda_l: float, tap: float) -> ModelParams:
        return params.replace(lambda_l=lambda_l, lambda_h=contact_ratio * lambda_l, baseline_tap=tap)

    def equilibrium(lambda_l: float, tap: float) -> np.ndarray:
        evaluations["count"] += 1
        X = endemic_equilibrium(variant(lambda_l, tap), seed_state=seeds["state"])
        # reuse endemic states as seeds; disease-free ones would trap later solves
        if float(prevalence(X)) > 1e-3:
            seeds["state"] = X
        return X

    def fitted_tap(lambda_l: float) -> float:
        low, high = tap_box
        X_low = equilibrium(lambda_l, low)
        if float(prevalence(X_low)) < 1e-6:
            return low
        tap, _ = _bisect(
            lambda v: float(treated_fraction(equilibrium(lambda_l, v))) - treated_target,
            low, high, tol, maxiter, f"treated fraction at lambda_L={lambda_l:.4g}",
        )
        return tap

    def prevalence_gap(lambda_l: float) -> float:
        return float(prevalence(equilibrium(lambda_l, fitted_tap(lambda_l)))) - prevalence_target

    lambda_l, outer_iterations = _bisect(prevalence_gap, lambda_box[0], lambda_box[1], tol, maxiter, "prevalence")
    tap = fitted_tap(lambda_l)
    X = equilibrium(lambda_l, tap)
    prev, tf = float(prevalence(X)), float(treated_fraction(X))
    if abs(prev - prevalence_target) > accept_tol or abs(tf - treated_target) > accept_tol:
        raise CalibrationError(f"Calibration stopped at prevalence {prev:.4f}, treated fraction {tf:.4f}")
    logging.info(msg=f"Calibrated lambda_L={lambda_l:.6g}, baseline_tap={tap:.6g} "
                     f"({outer_iterations} outer steps, {evaluations['count']} equilibria).")
    return CalibrationResult(params=variant(lambda_l, tap), equilibrium=jnp.asarray(X),
                             prevalence=prev, treated_fraction=tf, iterations=outer_iterations)


def saturating_schedule(
    params: ModelParams,
    costs: CostParams,
    X0,
    grid,
    budget_limit: float,
    arm: Literal["prep", "tap"],
    rel_tol: float = default_rel_tol,
    abs_tol: float = default_abs_tol,
    tol: float = 1e-8,
) -> ControlSchedule:
    """
    Single-arm schedule ("prep" or "tap") whose excess spend equals the
    budget limit in every interval.
    """
    if arm not in ("prep", "tap"):
        raise ValueError(f"arm must be 'prep' or 'tap', got {arm!r}")
    column = 0 if arm == "prep" else 1
    values = np.zeros((grid.n_int, n_controls))
    X = np.asarray(X0, dtype=float)
    for i in range(grid.n_int):
        a = grid.t0 + i * grid.dt
        baseline = integrate(params, X, ControlSchedule.zeros(1, grid.dt, t0=a),
                             rel_tol=rel_tol, abs_tol=abs_tol, costs=costs).total("spend")

        def run(u: float) -> Trajectory:
            u_pair = np.zeros(n_controls)
            u_pair[column] = u
            schedule = ControlSchedule(dt=grid.dt, values=jnp.asarray(u_pair)[None, :], t0=a)
            return integrate(params, X, schedule, rel_tol=rel_tol, abs_tol=abs_tol, costs=costs)

        def gap(u: float) -> float:
            return (run(u).total("spend") - baseline) / budget_limit - 1.0

        u = 0.0
        if budget_limit > 0:
            upper = 1e-3
            while gap(upper) < 0:
                upper *= 2.0
                if upper > 1e3:
                    raise CalibrationError(f"Cannot saturate the budget with {arm} in interval {i}")
            u, _ = _bisect(gap, 0.0, upper, tol, 200, f"{arm} saturation in interval {i}")
        values[i, column] = u
        X = np.maximum(run(u).final_state, 0.0)
    return ControlSchedule(dt=grid.dt, values=jnp.asarray(values), t0=grid.t0)
