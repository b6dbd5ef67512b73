"""
LGR collocation transcription of the budget-constrained control problem.

Decision vector (scaled), interval-major everywhere:

    [ X  (n_int, n_cp+1, 9) / N0 | X_base (n_int, n_cp+1, 9) / N0 | U (n_int, 2) / control_scale ]

Equality rows, in this order: controlled collocation, baseline collocation,
continuity defects between consecutive intervals, the initial condition and
the baseline anchors. One budget inequality per interval.
"""
import logging
from typing import Callable, Optional, Tuple

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp
from flax import struct
from typing_extensions import Literal

from hivopt.defaults import default_control_scale, default_aggressive_control
from hivopt.hiv_model import (
    CostParams,
    ModelParams,
    budget_rate,
    discount_factor,
    incidence_cost,
    incidence_cost_gradient,
    n_controls,
    n_states,
    rhs,
)
from hivopt.ode_oracle import ControlSchedule
from hivopt.problem import NlpProblem
from hivopt.spectral import LgrScheme, interpolation_matrix


@struct.dataclass
class CollocationGrid:
    """
    Equal control intervals on [t0, t0 + n_int * dt] sharing one LGR scheme.

    Attributes:
        n_int: Number of control intervals.
        dt: Interval length in months.
        scheme: LGR points, weights and differentiation matrix on [-1, 1].
        t0: Initial time.
    """
    n_int: int = struct.field(pytree_node=False)
    dt: float
    scheme: LgrScheme
    t0: float = 0.0

    @property
    def n_cp(self) -> int:
        return self.scheme.n_cp

    @property
    def t_f(self) -> float:
        return self.t0 + self.n_int * self.dt

    @property
    def knots(self) -> jnp.ndarray:
        return self.t0 + self.dt * jnp.arange(self.n_int + 1)

    @property
    def grid_times(self) -> jnp.ndarray:
        """tau[i, k] = t_i + dt / 2 * (theta_k + 1), shape (n_int, n_cp + 1)."""
        return self.knots[:-1, None] + 0.5 * self.dt * (self.scheme.points[None, :] + 1.0)


def build_grid(n_int: int, dt: float, n_cp: int, t0: float = 0.0) -> CollocationGrid:
    if n_int < 1:
        raise ValueError(f"Need at least one control interval, got n_int={n_int}")
    if not dt > 0:
        raise ValueError(f"Interval length must be positive, got dt={dt}")
    if n_cp < 2:
        raise ValueError(f"Need at least two collocation points, got n_cp={n_cp}")
    return CollocationGrid(n_int=n_int, dt=float(dt), scheme=LgrScheme.build(n_cp), t0=float(t0))


def _interval_times(grid: CollocationGrid, t_start):
    t_start = grid.t0 if t_start is None else t_start
    return t_start + 0.5 * grid.dt * (grid.scheme.points + 1.0)


def collocation_residuals(X_i, U_i, grid: CollocationGrid, params, dynamics: Callable = rhs, t_start=None) -> jnp.ndarray:
    """
    D X_i - dt / 2 * F(X_i, U_i) at the n_cp collocation points.

    Args:
        X_i: States at the n_cp + 1 grid points of one interval.
        U_i: Controls of the interval.
        grid: Collocation grid.
        params: Passed through to `dynamics(t, X, u, params)`.
        dynamics: Right-hand side, the transmission model by default.
        t_start: Left knot of the interval (only matters for time-dependent dynamics).
    """
    tau = _interval_times(grid, t_start)
    F = dynamics(tau[1:], X_i[1:], U_i, params)
    return grid.scheme.diff_matrix @ X_i - 0.5 * grid.dt * F


def propagate(X_i, U_i, grid: CollocationGrid, params, dynamics: Callable = rhs, t_start=None) -> jnp.ndarray:
    """Interval endpoint by Radau quadrature of the dynamics."""
    tau = _interval_times(grid, t_start)
    F = dynamics(tau, X_i, U_i, params)
    return X_i[0] + 0.5 * grid.dt * jnp.tensordot(grid.scheme.weights, F, axes=1)


def continuity_defect(X_i, U_i, X_next_start, grid: CollocationGrid, params, dynamics: Callable = rhs, t_start=None) -> jnp.ndarray:
    return propagate(X_i, U_i, grid, params, dynamics, t_start) - X_next_start


def baseline_residuals(X0_i, X_i_start, grid: CollocationGrid, params, dynamics: Callable = rhs,
                       t_start=None) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """Zero-control collocation residuals of the baseline block and its anchor to the controlled start."""
    residuals = collocation_residuals(X0_i, jnp.zeros(n_controls), grid, params, dynamics, t_start)
    return residuals, X0_i[0] - X_i_start


def budget_inequality(X_i, X0_i, U_i, grid: CollocationGrid, costs: CostParams, budget_limit) -> jnp.ndarray:
    """Excess spend over the zero-control baseline minus the limit; feasible when <= 0."""
    excess = budget_rate(X_i, U_i, costs) - budget_rate(X0_i, jnp.zeros(n_controls), costs)
    return 0.5 * grid.dt * jnp.dot(grid.scheme.weights, excess) - budget_limit


def _quadrature_factors(grid: CollocationGrid, costs: Optional[CostParams], weights) -> jnp.ndarray:
    weights = grid.scheme.weights if weights is None else jnp.asarray(weights)
    factors = 0.5 * grid.dt * jnp.broadcast_to(weights, (grid.n_int, grid.n_cp + 1))
    if costs is not None:
        factors = factors * discount_factor(grid.grid_times, costs)
    return factors


def objective(X, grid: CollocationGrid, params: ModelParams, costs: Optional[CostParams] = None, weights=None) -> jnp.ndarray:
    """
    Quadrature of the incidence cost over all intervals.

    Args:
        X: Controlled states, shape (n_int, n_cp + 1, 9).
        costs: Supplies the discount rate; no discounting when omitted.
        weights: Quadrature weights override (defaults to the LGR weights).
    """
    return jnp.sum(_quadrature_factors(grid, costs, weights) * incidence_cost(X, params))


def objective_gradient(X, grid: CollocationGrid, params: ModelParams, costs: Optional[CostParams] = None,
                       weights=None) -> jnp.ndarray:
    """Closed-form gradient of `objective` with respect to X, same shape as X."""
    return _quadrature_factors(grid, costs, weights)[..., None] * incidence_cost_gradient(X, params)


class DecisionLayout:
    """
    Flat index bookkeeping for the decision vector.

    Attributes:
        n_int, n_cp, n_states, n_controls: Problem dimensions.
        size (int): Total number of decision variables.
    """

    def __init__(self, n_int: int, n_cp: int, n_states: int = n_states, n_controls: int = n_controls) -> None:
        self.n_int = n_int
        self.n_cp = n_cp
        self.n_states = n_states
        self.n_controls = n_controls
        self.block_shape = (n_int, n_cp + 1, n_states)
        self.block_size = n_int * (n_cp + 1) * n_states
        self.state_offset = 0
        self.baseline_offset = self.block_size
        self.control_offset = 2 * self.block_size
        self.size = 2 * self.block_size + n_int * n_controls

    def state_index(self, i: int, k: int, j: int) -> int:
        return self.state_offset + (i * (self.n_cp + 1) + k) * self.n_states + j

    def baseline_index(self, i: int, k: int, j: int) -> int:
        return self.baseline_offset + (i * (self.n_cp + 1) + k) * self.n_states + j

    def control_index(self, i: int, c: int) -> int:
        return self.control_offset + i * self.n_controls + c

    def pack(self, X, X_base, U) -> jnp.ndarray:
        return jnp.concatenate([jnp.ravel(X), jnp.ravel(X_base), jnp.ravel(U)])

    def unpack(self, z) -> Tuple[jnp.ndarray, jnp.ndarray, jnp.ndarray]:
        z = jnp.asarray(z)
        if z.shape != (self.size,):
            raise ValueError(f"Decision vector must be of shape ({self.size},), not {z.shape}")
        X = z[self.state_offset:self.baseline_offset].reshape(self.block_shape)
        X_base = z[self.baseline_offset:self.control_offset].reshape(self.block_shape)
        U = z[self.control_offset:].reshape(self.n_int, self.n_controls)
        return X, X_base, U

    def local_indices(self, i: int) -> np.ndarray:
        """Global indices of interval i's variables, ordered [X_i, X_base_i, U_i]."""
        per = (self.n_cp + 1) * self.n_states
        states = self.state_offset + i * per + np.arange(per)
        baseline = self.baseline_offset + i * per + np.arange(per)
        controls = self.control_offset + i * self.n_controls + np.arange(self.n_controls)
        return np.concatenate([states, baseline, controls])


class CollocationTrajectory:
    """
    Piecewise-polynomial state trajectory recovered from a decision vector.

    Evaluation is right-continuous at the knots, so t_i returns the stored
    start state of interval i + 1.
    """

    def __init__(self, grid: CollocationGrid, states) -> None:
        self.grid = grid
        self.states = jnp.asarray(states)

    def __call__(self, t) -> jnp.ndarray:
        t = jnp.asarray(t, dtype=float)
        schedule = ControlSchedule(dt=self.grid.dt, values=jnp.zeros((self.grid.n_int, n_controls)), t0=self.grid.t0)
        i = schedule.interval_index(t)
        theta = 2.0 * (t - self.grid.knots[i]) / self.grid.dt - 1.0
        basis = interpolation_matrix(self.grid.scheme.points, theta)
        return jnp.einsum("...k,...kj->...j", basis, self.states[i])

    @property
    def knot_states(self) -> jnp.ndarray:
        return self.states[:, 0, :]


class TranscribedNlp:
    """
    The transcribed problem with scaled evaluators ready for the SQP solver.

    States are carried in units of N0 = sum(X0), controls in units of
    `control_scale`, the objective is divided by N0, collocation and defect
    rows by N0 and budget rows by B_lim (or dt * N0 * max cost coefficient
    when B_lim = 0).
    """

    def __init__(
        self,
        grid: CollocationGrid,
        params: ModelParams,
        costs: CostParams,
        X0,
        budget_limit: float,
        control_scale: float = default_control_scale,
    ) -> None:
        X0 = jnp.asarray(X0, dtype=float)
        if X0.shape != (n_states,):
            raise ValueError(f"X0 must be of shape ({n_states},), not {X0.shape}")
        if bool(jnp.any(X0 < 0)):
            raise ValueError(f"X0 must be nonnegative, got {X0}")
        if budget_limit < 0:
            raise ValueError(f"Budget limit must be nonnegative, got {budget_limit}")
        if not control_scale > 0:
            raise ValueError(f"control_scale must be positive, got {control_scale}")
        self.grid = grid
        self.params = params.validate()
        self.costs = costs.validate()
        self.X0 = X0
        self.budget_limit = float(budget_limit)
        self.control_scale = float(control_scale)
        self.layout = DecisionLayout(grid.n_int, grid.n_cp)

        total = float(jnp.sum(X0))
        self.state_scale = total if total > 0 else 1.0
        if self.budget_limit > 0:
            self.budget_scale = self.budget_limit
        else:
            top_cost = max(costs.tap_treatment, costs.prep_treatment, costs.tap_enrollment, costs.prep_enrollment)
            self.budget_scale = grid.dt * self.state_scale * top_cost or 1.0

        n_int, n_cp = grid.n_int, grid.n_cp
        self.n_collocation = n_cp * n_states
        self.n_eq = 2 * n_int * self.n_collocation + (n_int - 1) * n_states + n_states + n_int * n_states
        self.n_ineq = n_int
        self.lower_bounds = jnp.full(self.layout.size, -jnp.inf).at[self.layout.control_offset:].set(0.0)

        self._local_values = jax.jit(jax.vmap(self._local))
        self._local_jacobian = jax.jit(jax.vmap(jax.jacfwd(self._local)))
        self._objective = jax.jit(lambda X: objective(X, grid, params, costs))
        self._objective_gradient = jax.jit(lambda X: objective_gradient(X, grid, params, costs))
        self._build_patterns()
        logging.debug(msg=f"Transcribed NLP: {self.layout.size} variables, {self.n_eq} equalities, {self.n_ineq} inequalities.")

    # scaling

    def to_physical(self, z) -> Tuple[jnp.ndarray, jnp.ndarray, jnp.ndarray]:
        x, x_base, u = self.layout.unpack(z)
        return x * self.state_scale, x_base * self.state_scale, u * self.control_scale

    def to_scaled(self, X, X_base, U) -> jnp.ndarray:
        return self.layout.pack(jnp.asarray(X) / self.state_scale, jnp.asarray(X_base) / self.state_scale,
                                jnp.asarray(U) / self.control_scale)

    # per-interval kernel shared by values and Jacobians

    def _local(self, v, t_start):
        per = (self.grid.n_cp + 1) * n_states
        shape = (self.grid.n_cp + 1, n_states)
        X = v[:per].reshape(shape) * self.state_scale
        X_base = v[per:2 * per].reshape(shape) * self.state_scale
        U = v[2 * per:] * self.control_scale
        controlled = collocation_residuals(X, U, self.grid, self.params, t_start=t_start)
        baseline, _ = baseline_residuals(X_base, X[0], self.grid, self.params, t_start=t_start)
        endpoint = propagate(X, U, self.grid, self.params, t_start=t_start)
        budget = budget_inequality(X, X_base, U, self.grid, self.costs, self.budget_limit)
        return jnp.concatenate([
            jnp.ravel(controlled) / self.state_scale,
            jnp.ravel(baseline) / self.state_scale,
            endpoint / self.state_scale,
            (budget / self.budget_scale)[None],
        ])

    def _local_vectors(self, z) -> jnp.ndarray:
        x, x_base, u = self.layout.unpack(jnp.asarray(z, dtype=float))
        n_int = self.grid.n_int
        return jnp.concatenate([x.reshape(n_int, -1), x_base.reshape(n_int, -1), u], axis=1)

    def _build_patterns(self) -> None:
        """Row/column structure of both Jacobians and where each nonzero comes from."""
        n_int, nc, ns = self.grid.n_int, self.n_collocation, n_states
        per = (self.grid.n_cp + 1) * ns
        n_local = 2 * per + n_controls
        m_local = 2 * nc + ns + 1
        cols_x = np.arange(per)
        cols_base = per + np.arange(per)
        cols_u = 2 * per + np.arange(n_controls)
        cols_controlled = np.concatenate([cols_x, cols_u])

        rows, cols, sources = [], [], []
        linear_rows, linear_cols, linear_vals = [], [], []

        def add_block(row_start, local_rows, local_cols, i, glob):
            r, c = np.meshgrid(local_rows, local_cols, indexing="ij")
            rows.append(row_start + (r - local_rows[0]).ravel())
            cols.append(glob[c.ravel()])
            sources.append(((i * m_local + r) * n_local + c).ravel())

        defect_offset = 2 * n_int * nc
        initial_offset = defect_offset + (n_int - 1) * ns
        anchor_offset = initial_offset + ns
        eye = np.arange(ns)
        for i in range(n_int):
            glob = self.layout.local_indices(i)
            add_block(i * nc, np.arange(nc), cols_controlled, i, glob)
            add_block(n_int * nc + i * nc, nc + np.arange(nc), cols_base, i, glob)
            if i < n_int - 1:
                add_block(defect_offset + i * ns, 2 * nc + eye, cols_controlled, i, glob)
                linear_rows.append(defect_offset + i * ns + eye)
                linear_cols.append(np.array([self.layout.state_index(i + 1, 0, j) for j in eye]))
                linear_vals.append(-np.ones(ns))
            linear_rows.append(anchor_offset + i * ns + eye)
            linear_cols.append(np.array([self.layout.baseline_index(i, 0, j) for j in eye]))
            linear_vals.append(np.ones(ns))
            linear_rows.append(anchor_offset + i * ns + eye)
            linear_cols.append(np.array([self.layout.state_index(i, 0, j) for j in eye]))
            linear_vals.append(-np.ones(ns))
        linear_rows.append(initial_offset + eye)
        linear_cols.append(np.array([self.layout.state_index(0, 0, j) for j in eye]))
        linear_vals.append(np.ones(ns))

        self._eq_rows = np.concatenate(rows + linear_rows)
        self._eq_cols = np.concatenate(cols + linear_cols)
        self._eq_sources = np.concatenate(sources)
        self._eq_linear = np.concatenate(linear_vals)

        budget_row = m_local - 1
        local_cols = np.arange(n_local)
        self._ineq_rows = np.repeat(np.arange(n_int), n_local)
        self._ineq_cols = np.concatenate([self.layout.local_indices(i) for i in range(n_int)])
        self._ineq_sources = np.concatenate([(i * m_local + budget_row) * n_local + local_cols for i in range(n_int)])

    @property
    def eq_sparsity(self) -> sp.csr_matrix:
        data = np.ones(self._eq_rows.shape[0], dtype=bool)
        return sp.csr_matrix((data, (self._eq_rows, self._eq_cols)), shape=(self.n_eq, self.layout.size))

    @property
    def ineq_sparsity(self) -> sp.csr_matrix:
        data = np.ones(self._ineq_rows.shape[0], dtype=bool)
        return sp.csr_matrix((data, (self._ineq_rows, self._ineq_cols)), shape=(self.n_ineq, self.layout.size))

    @property
    def hessian_blocks(self):
        return [self.layout.local_indices(i) for i in range(self.grid.n_int)]

    # evaluators on the scaled decision vector

    def objective(self, z) -> float:
        X, _, _ = self.to_physical(z)
        return float(self._objective(X)) / self.state_scale

    def gradient(self, z) -> np.ndarray:
        X, _, _ = self.to_physical(z)
        grad = np.zeros(self.layout.size)
        grad[:self.layout.block_size] = np.ravel(self._objective_gradient(X))
        return grad

    def eq_constraints(self, z) -> np.ndarray:
        values = self._local_values(self._local_vectors(z), self.grid.knots[:-1])
        x, x_base, _ = self.layout.unpack(jnp.asarray(z, dtype=float))
        nc, ns = self.n_collocation, n_states
        endpoint = values[:, 2 * nc:2 * nc + ns]
        return np.asarray(jnp.concatenate([
            jnp.ravel(values[:, :nc]),
            jnp.ravel(values[:, nc:2 * nc]),
            jnp.ravel(endpoint[:-1] - x[1:, 0, :]),
            x[0, 0, :] - self.X0 / self.state_scale,
            jnp.ravel(x_base[:, 0, :] - x[:, 0, :]),
        ]))

    def ineq_constraints(self, z) -> np.ndarray:
        values = self._local_values(self._local_vectors(z), self.grid.knots[:-1])
        return np.asarray(values[:, -1])

    def _jacobian_values(self, z) -> np.ndarray:
        return np.asarray(self._local_jacobian(self._local_vectors(z), self.grid.knots[:-1])).ravel()

    def eq_jacobian(self, z) -> sp.csr_matrix:
        data = np.concatenate([self._jacobian_values(z)[self._eq_sources], self._eq_linear])
        return sp.csr_matrix((data, (self._eq_rows, self._eq_cols)), shape=(self.n_eq, self.layout.size))

    def ineq_jacobian(self, z) -> sp.csr_matrix:
        data = self._jacobian_values(z)[self._ineq_sources]
        return sp.csr_matrix((data, (self._ineq_rows, self._ineq_cols)), shape=(self.n_ineq, self.layout.size))

    def as_problem(self, info: str = "transcribed HIV allocation") -> NlpProblem:
        return NlpProblem(
            info=info,
            n=self.layout.size,
            func=self.objective,
            grad=self.gradient,
            eq_constraints=self.eq_constraints,
            eq_jacobian=self.eq_jacobian,
            ineq_constraints=self.ineq_constraints,
            ineq_jacobian=self.ineq_jacobian,
            lower_bounds=self.lower_bounds,
            eq_sparsity=self.eq_sparsity,
            ineq_sparsity=self.ineq_sparsity,
            hessian_blocks=self.hessian_blocks,
        )

    # starting points and post-processing

    def initial_guess(self, policy: Literal["replicated", "aggressive", "simulated"] = "replicated") -> jnp.ndarray:
        """
        "replicated": X0 at every grid point for both blocks, zero controls.
        "aggressive": replicated states, small positive controls.
        "simulated": the zero-control collocation solution.
        """
        if policy == "simulated":
            return solve_dynamics(self, ControlSchedule.zeros(self.grid.n_int, self.grid.dt, self.grid.t0))
        X = jnp.broadcast_to(self.X0, self.layout.block_shape)
        if policy == "replicated":
            U = jnp.zeros((self.grid.n_int, n_controls))
        elif policy == "aggressive":
            U = jnp.full((self.grid.n_int, n_controls), default_aggressive_control)
        else:
            raise ValueError(f"Unknown initial guess policy {policy!r}")
        return self.to_scaled(X, X, U)

    def check_nonnegative(self, z, rel_tol: float = 1e-6) -> bool:
        X, X_base, _ = self.to_physical(z)
        lowest = float(jnp.minimum(jnp.min(X), jnp.min(X_base)))
        if lowest < -rel_tol * self.state_scale:
            logging.warning(msg=f"Negative state excursion {lowest:.4g} beyond {rel_tol:.0e} * N(0).")
            return False
        return True

    def extract_solution(self, z) -> Tuple[ControlSchedule, CollocationTrajectory]:
        X, _, U = self.to_physical(z)
        schedule = ControlSchedule(dt=self.grid.dt, values=jnp.maximum(U, 0.0), t0=self.grid.t0)
        return schedule, CollocationTrajectory(self.grid, X)

    def baseline_trajectory(self, z) -> CollocationTrajectory:
        _, X_base, _ = self.to_physical(z)
        return CollocationTrajectory(self.grid, X_base)


def build_nlp(grid: CollocationGrid, params: ModelParams, costs: CostParams, X0, budget_limit: float,
              control_scale: float = default_control_scale) -> TranscribedNlp:
    return TranscribedNlp(grid, params, costs, X0, budget_limit, control_scale)


def extract_solution(z, nlp: TranscribedNlp) -> Tuple[ControlSchedule, CollocationTrajectory]:
    return nlp.extract_solution(z)


@jax.jit
def _newton_step(rows, start, U, grid: CollocationGrid, params: ModelParams, t_start):
    def residual(free):
        X = jnp.concatenate([start[None, :], free.reshape(grid.n_cp, n_states)])
        return jnp.ravel(collocation_residuals(X, U, grid, params, t_start=t_start))

    return jnp.linalg.solve(jax.jacfwd(residual)(rows), residual(rows))


def _solve_interval(start, U, grid: CollocationGrid, params: ModelParams, t_start, scale: float,
                    tol: float = 1e-13, max_iter: int = 50) -> jnp.ndarray:
    """Newton solve of one interval's collocation equations with the start row fixed."""
    rows = jnp.tile(start, grid.n_cp)
    for _ in range(max_iter):
        step = _newton_step(rows, start, U, grid, params, t_start)
        rows = rows - step
        if float(jnp.max(jnp.abs(step))) <= tol * scale:
            break
    else:
        logging.warning(msg=f"Collocation Newton solve did not settle on the interval starting at t={float(t_start):.4g}.")
    return jnp.concatenate([start[None, :], rows.reshape(grid.n_cp, n_states)])


def solve_dynamics(nlp: TranscribedNlp, schedule: ControlSchedule) -> jnp.ndarray:
    """
    Scaled decision vector satisfying every equality constraint for a fixed
    schedule: intervals are solved in turn, each started from the quadrature
    endpoint of the previous one, with its baseline started from the same state.
    """
    grid = nlp.grid
    if schedule.n_int != grid.n_int:
        raise ValueError(f"Schedule has {schedule.n_int} intervals, grid has {grid.n_int}")
    schedule = schedule.validate()
    zero = jnp.zeros(n_controls)
    start = nlp.X0
    X_blocks, base_blocks = [], []
    for i in range(grid.n_int):
        t_start = grid.knots[i]
        U = schedule.values[i]
        X_i = _solve_interval(start, U, grid, nlp.params, t_start, nlp.state_scale)
        X_blocks.append(X_i)
        base_blocks.append(_solve_interval(start, zero, grid, nlp.params, t_start, nlp.state_scale))
        start = propagate(X_i, U, grid, nlp.params, t_start=t_start)
    return nlp.to_scaled(jnp.stack(X_blocks), jnp.stack(base_blocks), schedule.values)
