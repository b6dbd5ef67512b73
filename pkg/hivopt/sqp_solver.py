"""
Line-search SQP for smooth problems in NlpProblem form

    min f(x)  s.t.  c_eq(x) = 0,  c_ineq(x) <= 0,  x >= lower_bounds

Each iteration solves a QP built from the objective gradient, the constraint
linearizations and a damped-BFGS model of the Lagrangian Hessian, then
globalizes with a backtracking search on the l1 merit function
f + nu * (|c_eq|_1 + |max(c_ineq, 0)|_1 + bound violation).

When the problem declares Hessian blocks (variables whose cross second
derivatives vanish), one BFGS matrix is kept per block and the KKT system
stays sparse.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from flax import struct

from hivopt.defaults import (
    default_constraint_tol,
    default_dense_qp_limit,
    default_fd_step,
    default_kkt_tol,
    default_max_iter,
    default_step_tol,
)
from hivopt.problem import NlpProblem
from hivopt.qp import solve_qp

CONVERGED = "converged"
MAX_ITER = "max-iter"
LINE_SEARCH_FAILURE = "line-search-failure"
INFEASIBLE = "infeasible"

history_columns = ("iteration", "objective", "violation", "kkt", "merit_before", "merit_after",
                   "alpha", "penalty", "step_norm", "qp_status", "second_order")


@struct.dataclass
class SolverOptions:
    """
    Attributes:
        max_iter: Iteration limit.
        constraint_tol: Max-norm feasibility tolerance (scaled units).
        kkt_tol: Optimality tolerance on the KKT residual.
        step_tol: Relative step length below which the iteration stops.
        penalty_factor: nu is kept >= penalty_factor * |multipliers|_inf.
        penalty_floor: Initial merit penalty.
        armijo: Sufficient-decrease constant.
        backtrack: Step contraction factor.
        min_alpha: Smallest trial step before declaring a line-search failure.
        fd_step: Relative finite-difference step for missing derivatives.
        elastic_penalty: Slack penalty of the elastic QP.
        hessian: "bfgs" or "fd" (dense finite-difference Lagrangian Hessian).
        second_order_correction: Retry a rejected full step with corrected constraints.
        dense_qp_limit: Largest subproblem solved by the dense QP; larger ones go to the sparse solver.
        log_every: Progress line every this many iterations.
    """
    max_iter: int = struct.field(pytree_node=False, default=default_max_iter)
    constraint_tol: float = default_constraint_tol
    kkt_tol: float = default_kkt_tol
    step_tol: float = default_step_tol
    penalty_factor: float = 2.0
    penalty_floor: float = 1.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_alpha: float = 1e-10
    fd_step: float = default_fd_step
    elastic_penalty: float = 1e3
    hessian: str = struct.field(pytree_node=False, default="bfgs")
    second_order_correction: bool = struct.field(pytree_node=False, default=True)
    dense_qp_limit: int = struct.field(pytree_node=False, default=default_dense_qp_limit)
    log_every: int = struct.field(pytree_node=False, default=10)

    def validate(self) -> "SolverOptions":
        positive = ["constraint_tol", "kkt_tol", "step_tol", "penalty_factor", "armijo", "min_alpha",
                    "fd_step", "elastic_penalty"]
        problems = [f"{name}={getattr(self, name)}" for name in positive if not getattr(self, name) > 0]
        if self.max_iter < 1 or self.dense_qp_limit < 1:
            problems.append(f"max_iter={self.max_iter}, dense_qp_limit={self.dense_qp_limit}")
        if not 0 < self.backtrack < 1:
            problems.append(f"backtrack={self.backtrack}")
        if self.hessian not in ("bfgs", "fd"):
            problems.append(f"hessian={self.hessian!r}")
        if problems:
            raise ValueError("Invalid solver options: " + ", ".join(problems))
        return self


class SolverResult:
    """
    Attributes:
        x: Final iterate.
        objective: f(x).
        violation: Max constraint violation at x.
        kkt: KKT residual at x.
        iterations: Number of SQP iterations taken.
        status: "converged", "max-iter", "line-search-failure" or "infeasible".
        eq_multipliers, ineq_multipliers, bound_multipliers: Final multiplier estimates.
        history: Per-iteration records keyed by history_columns.
    """

    def __init__(self, x, objective, violation, kkt, iterations, status, eq_multipliers,
                 ineq_multipliers, bound_multipliers, history: Dict[str, List]) -> None:
        self.x = x
        self.objective = objective
        self.violation = violation
        self.kkt = kkt
        self.iterations = iterations
        self.status = status
        self.eq_multipliers = eq_multipliers
        self.ineq_multipliers = ineq_multipliers
        self.bound_multipliers = bound_multipliers
        self.history = history

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def __str__(self) -> str:
        return (f"{self.status} after {self.iterations} iterations: f={self.objective:.10g}, "
                f"violation={self.violation:.3e}, kkt={self.kkt:.3e}")


def _cpr_groups(pattern: sp.csc_matrix) -> List[List[int]]:
    """Greedy column grouping: columns in one group share no nonzero row."""
    groups: List[List[int]] = []
    taken: List[set] = []
    for j in range(pattern.shape[1]):
        rows = set(pattern.indices[pattern.indptr[j]:pattern.indptr[j + 1]].tolist())
        for group, used in zip(groups, taken):
            if not used & rows:
                group.append(j)
                used |= rows
                break
        else:
            groups.append([j])
            taken.append(set(rows))
    return groups


def fd_jacobian(fun: Callable, x, step: float = default_fd_step, sparsity=None):
    """
    Centered-difference Jacobian of fun at x.

    Args:
        fun: R^n -> R^m (a scalar output counts as m = 1).
        x: Evaluation point.
        step: Relative step, h_j = step * max(1, |x_j|).
        sparsity: Optional boolean (m, n) pattern. Columns with disjoint row
            patterns are perturbed together and only declared entries are filled.

    Returns:
        Dense (m, n) array, or a csr matrix carrying the pattern when one is given.
    """
    if not step > 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}")
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = step * np.maximum(1.0, np.abs(x))

    def central(e: np.ndarray) -> np.ndarray:
        return 0.5 * (np.atleast_1d(np.asarray(fun(x + e), dtype=float))
                      - np.atleast_1d(np.asarray(fun(x - e), dtype=float)))

    if sparsity is None:
        columns = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = h[j]
            columns.append(central(e) / h[j])
        return np.column_stack(columns)

    pattern = sp.csc_matrix(sparsity, dtype=bool)
    pattern.eliminate_zeros()
    rows, cols, vals = [], [], []
    for group in _cpr_groups(pattern):
        e = np.zeros(n)
        e[group] = h[group]
        diff = central(e)
        for j in group:
            r = pattern.indices[pattern.indptr[j]:pattern.indptr[j + 1]]
            rows.append(r)
            cols.append(np.full(r.shape[0], j))
            vals.append(diff[r] / h[j])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=pattern.shape)


class _Evaluation:
    """Everything the iteration needs at one point."""

    def __init__(self, x, f, g, ce, ci, Je, Ji, lower_bounds) -> None:
        self.x = x
        self.f = f
        self.g = g
        self.ce = ce
        self.ci = ci
        self.Je = Je
        self.Ji = Ji
        self.bound_gap = lower_bounds - x    # feasible when <= 0

    def violation(self, bounded) -> float:
        parts = [np.abs(self.ce), np.maximum(self.ci, 0.0), np.maximum(self.bound_gap[bounded], 0.0), [0.0]]
        return float(max(np.max(p) for p in parts))

    def infeasibility(self, bounded) -> float:
        return float(np.sum(np.abs(self.ce)) + np.sum(np.maximum(self.ci, 0.0))
                     + np.sum(np.maximum(self.bound_gap[bounded], 0.0)))

    def merit(self, penalty: float, bounded) -> float:
        return self.f + penalty * self.infeasibility(bounded)

    def lagrangian_gradient(self, lam_e, lam_i, lam_b, bounded) -> np.ndarray:
        grad = self.g + self.Je.T @ lam_e + self.Ji.T @ lam_i
        grad[bounded] -= lam_b
        return grad

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.f) and np.all(np.isfinite(self.ce)) and np.all(np.isfinite(self.ci)))


class _Evaluator:
    """Wraps a problem's callables, filling in finite differences where needed."""

    def __init__(self, problem: NlpProblem, options: SolverOptions) -> None:
        self.problem = problem
        self.options = options
        self.lower_bounds = np.asarray(problem.lower_bounds, dtype=float)
        self.nfev = 0

    def _constraints(self, fun, x) -> np.ndarray:
        return np.zeros(0) if fun is None else np.atleast_1d(np.asarray(fun(x), dtype=float))

    def _jacobian(self, fun, jac, sparsity, x) -> sp.csr_matrix:
        n = x.shape[0]
        if fun is None:
            return sp.csr_matrix((0, n))
        if jac is not None:
            J = jac(x)
            return sp.csr_matrix(J if sp.issparse(J) else np.asarray(J, dtype=float).reshape(-1, n))
        return sp.csr_matrix(fd_jacobian(fun, x, self.options.fd_step, sparsity))

    def __call__(self, x, derivatives: bool = True) -> _Evaluation:
        p = self.problem
        self.nfev += 1
        f = float(p.f(x))
        ce = self._constraints(p.eq_fun, x)
        ci = self._constraints(p.ineq_fun, x)
        g = Je = Ji = None
        if derivatives:
            if p.grad_fun is not None:
                g = np.asarray(p.grad_fun(x), dtype=float)
            else:
                g = np.ravel(fd_jacobian(lambda v: float(p.f(v)), x, self.options.fd_step))
            Je = self._jacobian(p.eq_fun, p.eq_jac, p.eq_sparsity, x)
            Ji = self._jacobian(p.ineq_fun, p.ineq_jac, p.ineq_sparsity, x)
        return _Evaluation(x, f, g, ce, ci, Je, Ji, self.lower_bounds)


def _kkt_terms(ev: _Evaluation, lam_e, lam_i, lam_b, bounded) -> float:
    stationarity = np.max(np.abs(ev.lagrangian_gradient(lam_e, lam_i, lam_b, bounded)), initial=0.0)
    complementarity = max(np.max(np.abs(lam_i * ev.ci), initial=0.0),
                          np.max(np.abs(lam_b * ev.bound_gap[bounded]), initial=0.0))
    dual = max(np.max(-lam_i, initial=0.0), np.max(-lam_b, initial=0.0))
    return float(max(stationarity, ev.violation(bounded), complementarity, dual))


def _split_multipliers(multipliers) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lam_e, lam_i, lam_b = (None, None, None) if multipliers is None else multipliers
    return (np.zeros(0) if lam_e is None else np.asarray(lam_e, dtype=float),
            np.zeros(0) if lam_i is None else np.asarray(lam_i, dtype=float),
            np.zeros(0) if lam_b is None else np.asarray(lam_b, dtype=float))


def kkt_residual(problem: NlpProblem, x, multipliers: Optional[Sequence] = None,
                 options: Optional[SolverOptions] = None) -> float:
    """
    Max-norm of the Lagrangian gradient, constraint violation, complementarity
    and dual infeasibility.

    Args:
        problem: The problem.
        x: Point of evaluation.
        multipliers: (eq, ineq, bound) multipliers; bound multipliers are
            listed for the variables with a finite lower bound, in order.
            Omitted parts count as zero.
    """
    options = SolverOptions() if options is None else options
    x = np.asarray(x, dtype=float)
    evaluator = _Evaluator(problem, options)
    ev = evaluator(x)
    bounded = np.flatnonzero(np.isfinite(evaluator.lower_bounds))
    lam_e, lam_i, lam_b = _split_multipliers(multipliers)
    lam_e = lam_e if lam_e.size else np.zeros(ev.ce.shape[0])
    lam_i = lam_i if lam_i.size else np.zeros(ev.ci.shape[0])
    lam_b = lam_b if lam_b.size else np.zeros(bounded.shape[0])
    return _kkt_terms(ev, lam_e, lam_i, lam_b, bounded)


class _BlockBfgs:
    """Damped BFGS matrices on disjoint variable blocks, started from the identity."""

    def __init__(self, blocks: Sequence[np.ndarray], n: int) -> None:
        self.blocks = [np.asarray(b, dtype=int) for b in blocks]
        covered = np.sort(np.concatenate(self.blocks))
        if not np.array_equal(covered, np.arange(n)):
            raise ValueError("Hessian blocks must partition the variables")
        self.mats = [np.eye(b.shape[0]) for b in self.blocks]
        self.n = n
        self.damped = 0
        self.skipped = 0

    def matrix(self) -> sp.csc_matrix:
        rows = np.concatenate([np.repeat(b, b.shape[0]) for b in self.blocks])
        cols = np.concatenate([np.tile(b, b.shape[0]) for b in self.blocks])
        data = np.concatenate([m.ravel() for m in self.mats])
        return sp.csc_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def update(self, s: np.ndarray, y: np.ndarray) -> None:
        for i, b in enumerate(self.blocks):
            s_b, y_b, B = s[b], y[b], self.mats[i]
            Bs = B @ s_b
            sBs = float(s_b @ Bs)
            if sBs <= 1e-20 * max(1.0, float(s_b @ s_b)):
                self.skipped += 1
                continue
            sy = float(s_b @ y_b)
            if sy < 0.2 * sBs:
                # Powell damping keeps the update positive definite
                theta = 0.8 * sBs / (sBs - sy)
                y_b = theta * y_b + (1.0 - theta) * Bs
                sy = float(s_b @ y_b)
                self.damped += 1
            B = B - np.outer(Bs, Bs) / sBs + np.outer(y_b, y_b) / sy
            self.mats[i] = 0.5 * (B + B.T)


def _fd_hessian(evaluator: _Evaluator, x, lam_e, lam_i, lam_b, bounded, step: float) -> sp.csc_matrix:
    """Centered differences of the Lagrangian gradient, shifted to be positive definite."""
    n = x.shape[0]
    h = step * np.maximum(1.0, np.abs(x))
    columns = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = h[j]
        plus = evaluator(x + e).lagrangian_gradient(lam_e, lam_i, lam_b, bounded)
        minus = evaluator(x - e).lagrangian_gradient(lam_e, lam_i, lam_b, bounded)
        columns.append((plus - minus) / (2.0 * h[j]))
    H = np.column_stack(columns)
    H = 0.5 * (H + H.T)
    eigenvalues = np.linalg.eigvalsh(H)
    floor = 1e-8 * max(1.0, float(np.max(np.abs(eigenvalues))))
    if eigenvalues[0] < floor:
        shift = floor - eigenvalues[0]
        logging.warning(msg=f"Finite-difference Hessian shifted by {shift:.3e} to positive definiteness.")
        H = H + shift * np.eye(n)
    return sp.csc_matrix(H)


def solve(problem: NlpProblem, x0, options: Optional[SolverOptions] = None) -> SolverResult:
    """
    Minimize `problem` from x0 (projected onto the bounds).

    Never raises on numerical trouble: the outcome is reported in
    SolverResult.status.
    """
    options = (SolverOptions() if options is None else options).validate()
    evaluator = _Evaluator(problem, options)
    lb = evaluator.lower_bounds
    bounded = np.flatnonzero(np.isfinite(lb))
    n = problem.n

    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError(f"x0 must be of shape ({n},), not {x.shape}")
    x[bounded] = np.maximum(x[bounded], lb[bounded])

    ev = evaluator(x)
    lam_e = np.zeros(ev.ce.shape[0])
    lam_i = np.zeros(ev.ci.shape[0])
    lam_b = np.zeros(bounded.shape[0])
    bound_rows = sp.csr_matrix((-np.ones(bounded.shape[0]), (np.arange(bounded.shape[0]), bounded)),
                               shape=(bounded.shape[0], n))
    blocks = problem.hessian_blocks if (problem.hessian_blocks is not None and options.hessian == "bfgs") else [np.arange(n)]
    hessian = _BlockBfgs(blocks, n)
    penalty = options.penalty_floor
    history: Dict[str, List] = {key: [] for key in history_columns}
    status = MAX_ITER
    iteration = 0

    for iteration in range(options.max_iter):
        violation = ev.violation(bounded)
        kkt = _kkt_terms(ev, lam_e, lam_i, lam_b, bounded)
        if violation <= options.constraint_tol and kkt <= options.kkt_tol:
            status = CONVERGED
            break
        if not ev.finite:
            status = LINE_SEARCH_FAILURE
            logging.warning(msg="Non-finite problem values at the current iterate.")
            break

        if options.hessian == "fd":
            H = _fd_hessian(evaluator, x, lam_e, lam_i, lam_b, bounded, options.fd_step)
        else:
            H = hessian.matrix()
        A_in = sp.vstack([ev.Ji, bound_rows], format="csr")
        c_in = np.concatenate([ev.ci, ev.bound_gap[bounded]])
        qp = solve_qp(H, ev.g, ev.Je, ev.ce, A_in, c_in, elastic_penalty=options.elastic_penalty,
                      dense_limit=options.dense_qp_limit)
        if not qp.ok:
            status = INFEASIBLE
            logging.warning(msg=f"QP subproblem {qp.status} at iteration {iteration}.")
            break
        d = qp.d
        qp_lam_e = qp.eq_multipliers
        qp_lam_i = qp.ineq_multipliers[:ev.ci.shape[0]]
        qp_lam_b = qp.ineq_multipliers[ev.ci.shape[0]:]

        largest = max(np.max(np.abs(qp_lam_e), initial=0.0), np.max(np.abs(qp.ineq_multipliers), initial=0.0))
        penalty = max(penalty, options.penalty_factor * largest)
        merit_before = ev.merit(penalty, bounded)
        slope = min(float(ev.g @ d) - penalty * ev.infeasibility(bounded), 0.0)

        alpha, accepted, corrected = 1.0, None, False
        while alpha >= options.min_alpha:
            trial_x = x + alpha * d
            trial_x[bounded] = np.maximum(trial_x[bounded], lb[bounded])
            trial = evaluator(trial_x, derivatives=False)
            if trial.finite and trial.merit(penalty, bounded) <= merit_before + options.armijo * alpha * slope:
                accepted = trial_x
                break
            if alpha == 1.0 and options.second_order_correction and (ev.ce.size or ev.ci.size) and trial.finite:
                soc = solve_qp(H, ev.g, ev.Je, trial.ce - ev.Je @ d, A_in,
                               np.concatenate([trial.ci - ev.Ji @ d, ev.bound_gap[bounded]]), factor=qp.factor,
                               dense_limit=options.dense_qp_limit)
                if soc.ok:
                    soc_x = x + soc.d
                    soc_x[bounded] = np.maximum(soc_x[bounded], lb[bounded])
                    soc_trial = evaluator(soc_x, derivatives=False)
                    if soc_trial.finite and soc_trial.merit(penalty, bounded) <= merit_before + options.armijo * slope:
                        accepted, corrected = soc_x, True
                        break
            alpha *= options.backtrack

        if accepted is None:
            status = LINE_SEARCH_FAILURE
            logging.warning(msg=f"Line search failed at iteration {iteration} (merit {merit_before:.10g}).")
            break

        new_ev = evaluator(accepted)
        step = accepted - x
        lam_e, lam_i, lam_b = qp_lam_e, qp_lam_i, qp_lam_b
        if options.hessian == "bfgs":
            y = (new_ev.lagrangian_gradient(lam_e, lam_i, lam_b, bounded)
                 - ev.lagrangian_gradient(lam_e, lam_i, lam_b, bounded))
            hessian.update(step, y)

        merit_after = new_ev.merit(penalty, bounded)
        step_norm = float(np.max(np.abs(step), initial=0.0))
        for key, value in zip(history_columns, (iteration, new_ev.f, new_ev.violation(bounded), kkt, merit_before,
                                                merit_after, 1.0 if corrected else alpha, penalty, step_norm,
                                                qp.status, corrected)):
            history[key].append(value)
        if iteration % options.log_every == 0:
            logging.info(msg=f"SQP iter {iteration}: f={new_ev.f:.10g}, violation={new_ev.violation(bounded):.3e}, "
                             f"kkt={kkt:.3e}, alpha={alpha:.3g}, penalty={penalty:.3g}")
        x, ev = accepted, new_ev

        if step_norm <= options.step_tol * (1.0 + float(np.max(np.abs(x), initial=0.0))):
            converged = (ev.violation(bounded) <= options.constraint_tol
                         and _kkt_terms(ev, lam_e, lam_i, lam_b, bounded) <= options.kkt_tol)
            status = CONVERGED if converged else LINE_SEARCH_FAILURE
            iteration += 1
            break
    else:
        iteration = options.max_iter

    violation = ev.violation(bounded)
    kkt = _kkt_terms(ev, lam_e, lam_i, lam_b, bounded)
    if status == MAX_ITER and violation <= options.constraint_tol and kkt <= options.kkt_tol:
        status = CONVERGED
    if status == CONVERGED and not (violation <= options.constraint_tol and kkt <= options.kkt_tol):
        status = LINE_SEARCH_FAILURE
    result = SolverResult(x=x, objective=ev.f, violation=violation, kkt=kkt, iterations=iteration, status=status,
                          eq_multipliers=lam_e, ineq_multipliers=lam_i, bound_multipliers=lam_b, history=history)
    logging.info(msg=f"SQP {result}")
    if hessian.damped:
        logging.debug(msg=f"{hessian.damped} damped and {hessian.skipped} skipped BFGS block updates.")
    return result
