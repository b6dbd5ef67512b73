"""
QP subproblem of the SQP iteration

    min  1/2 d'Hd + g'd
    s.t. A_eq d + c_eq  = 0
         A_in d + c_in <= 0

Multipliers follow H d + g + A_eq' lam + A_in' u = 0 with u >= 0.

Subproblems up to `dense_limit` variables go to quadprog (dense
Goldfarb-Idnani on a precomputed inverse Cholesky factor of H); larger
ones to jaxopt's OSQP with sparse BCOO matrix-vector products.
"""
import logging
from typing import List, Optional

import jax.numpy as jnp
import jaxopt
import numpy as np
import quadprog
import scipy.linalg as la
import scipy.sparse as sp
from jax.experimental import sparse as jsparse
from typing_extensions import Literal

from hivopt.defaults import default_dense_qp_limit

OPTIMAL = "optimal"
ELASTIC = "elastic"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class HessianFactor:
    """
    Inverse upper Cholesky factor R^{-1} of H = R'R, the form quadprog takes
    with factorized=True. A matrix that is not positive definite is shifted
    by a growing multiple of the identity.
    """

    def __init__(self, H, max_attempts: int = 8) -> None:
        H = H.toarray() if sp.issparse(H) else np.array(H, dtype=float)
        self.n = H.shape[0]
        self.shift = 0.0
        scale = max(1.0, float(np.max(np.abs(H), initial=0.0)))
        for _ in range(max_attempts):
            try:
                R = la.cholesky(H + self.shift * np.eye(self.n), lower=False)
                break
            except la.LinAlgError:
                self.shift = 1e-8 * scale if self.shift == 0.0 else 100.0 * self.shift
                logging.warning(msg=f"QP Hessian not positive definite, shifting by {self.shift:.1e}.")
        else:
            raise np.linalg.LinAlgError("QP Hessian could not be regularised")
        self.inverse = la.solve_triangular(R, np.eye(self.n), lower=False)


class QpResult:
    """
    Attributes:
        d: Primal step.
        eq_multipliers: Multipliers of the equalities.
        ineq_multipliers: Nonnegative multipliers of every inequality row.
        status: One of "optimal", "elastic", "infeasible", "max-iter".
        iterations: Solver iterations.
        active: Inequality rows active at exit.
        factor: Hessian factor of the dense path, reusable for corrected right-hand sides.
    """

    def __init__(self, d, eq_multipliers, ineq_multipliers, status: str, iterations: int,
                 active: List[int], factor: Optional[HessianFactor]) -> None:
        self.d = d
        self.eq_multipliers = eq_multipliers
        self.ineq_multipliers = ineq_multipliers
        self.status = status
        self.iterations = iterations
        self.active = active
        self.factor = factor

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, ELASTIC)


def _solve_dense(factor: HessianFactor, g, A_eq, c_eq, A_in, c_in) -> QpResult:
    n, m_e, m_i = g.shape[0], A_eq.shape[0], A_in.shape[0]
    # quadprog: min 1/2 x'Gx - a'x  s.t. C'x >= b, the first meq rows as equalities
    if not m_e + m_i:
        d = -factor.inverse @ (factor.inverse.T @ g)
        return QpResult(d, np.zeros(0), np.zeros(0), OPTIMAL, 0, [], factor)
    C = np.ascontiguousarray(sp.vstack([A_eq, -A_in], format="csr").toarray().T)
    b = np.concatenate([-c_eq, c_in])
    try:
        d, _, _, iterations, lagrangian, iact = quadprog.solve_qp(
            factor.inverse, -g, C, b, meq=m_e, factorized=True)
    except ValueError as err:
        logging.debug(msg=f"quadprog: {err}")
        return QpResult(np.zeros(n), np.zeros(m_e), np.zeros(m_i), INFEASIBLE, 0, [], factor)
    lagrangian = np.asarray(lagrangian, dtype=float)
    active = sorted(int(j) - 1 - m_e for j in np.atleast_1d(iact) if int(j) > m_e)
    return QpResult(np.asarray(d, dtype=float), -lagrangian[:m_e], np.maximum(lagrangian[m_e:], 0.0),
                    OPTIMAL, int(np.atleast_1d(iterations)[0]), active, factor)


def _matvec(M, x):
    return M @ x


def _solve_sparse(H, g, A_eq, c_eq, A_in, c_in, tol: float, max_iter: int) -> QpResult:
    n, m_e, m_i = g.shape[0], A_eq.shape[0], A_in.shape[0]
    # OSQP: min 1/2 x'Qx + c'x  s.t. Ax = b, Gx <= h, with Qx + c + A'y + G'z = 0
    solver = jaxopt.OSQP(matvec_Q=_matvec, matvec_A=_matvec, matvec_G=_matvec, tol=tol, maxiter=max_iter,
                         check_primal_dual_infeasability=True)
    as_bcoo = lambda M: jsparse.BCOO.from_scipy_sparse(sp.coo_matrix(M))
    params_eq = (as_bcoo(A_eq), jnp.asarray(-c_eq)) if m_e else None
    params_ineq = (as_bcoo(A_in), jnp.asarray(-c_in)) if m_i else None
    sol, state = solver.run(params_obj=(as_bcoo(H), jnp.asarray(g)), params_eq=params_eq, params_ineq=params_ineq)

    status = int(state.status)
    if status == jaxopt.BoxOSQP.PRIMAL_INFEASIBLE:
        result_status = INFEASIBLE
    elif status == jaxopt.BoxOSQP.SOLVED:
        result_status = OPTIMAL
    else:
        result_status = MAX_ITER
    lam_e = np.asarray(sol.dual_eq, dtype=float) if m_e else np.zeros(0)
    u = np.maximum(np.asarray(sol.dual_ineq, dtype=float), 0.0) if m_i else np.zeros(0)
    active = [int(j) for j in np.flatnonzero(u > tol * max(1.0, float(np.max(u, initial=0.0))))]
    return QpResult(np.asarray(sol.primal, dtype=float), lam_e, u, result_status, int(state.iter_num), active, None)


def solve_qp(
    H,
    g,
    A_eq,
    c_eq,
    A_in,
    c_in,
    factor: Optional[HessianFactor] = None,
    elastic_penalty: Optional[float] = None,
    method: Literal["auto", "dense", "sparse"] = "auto",
    dense_limit: int = default_dense_qp_limit,
    tol: float = 1e-8,
    max_iter: int = 20000,
) -> QpResult:
    """
    Solve the subproblem; H must be positive semidefinite.

    When the inequalities are inconsistent and `elastic_penalty` is given,
    the problem is re-solved with nonnegative slacks s on the inequalities,
    A_in d + c_in <= s, penalised by elastic_penalty * sum(s) + 1/2 |s|^2.

    Args:
        factor: Hessian factor of an earlier dense solve with the same H.
        method: "dense" (quadprog), "sparse" (OSQP) or "auto" by dense_limit.
        tol, max_iter: OSQP stopping rule; the dense path is exact.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    A_eq = sp.csr_matrix(A_eq) if A_eq is not None else sp.csr_matrix((0, n))
    c_eq = np.asarray(c_eq, dtype=float) if c_eq is not None else np.zeros(0)
    A_in = sp.csr_matrix(A_in) if A_in is not None else sp.csr_matrix((0, n))
    c_in = np.asarray(c_in, dtype=float) if c_in is not None else np.zeros(0)
    if method not in ("auto", "dense", "sparse"):
        raise ValueError(f"Unknown QP method {method!r}")
    dense = method == "dense" or (method == "auto" and n <= dense_limit)

    def run(H_, g_, A_eq_, c_eq_, A_in_, c_in_, factor_=None) -> QpResult:
        if dense:
            return _solve_dense(factor_ if factor_ is not None else HessianFactor(H_), g_, A_eq_, c_eq_, A_in_, c_in_)
        return _solve_sparse(sp.csr_matrix(H_), g_, A_eq_, c_eq_, A_in_, c_in_, tol, max_iter)

    result = run(H, g, A_eq, c_eq, A_in, c_in, factor)
    if result.status == OPTIMAL or elastic_penalty is None or A_in.shape[0] == 0:
        return result

    logging.warning(msg=f"QP subproblem {result.status}, switching to elastic mode.")
    m_i = A_in.shape[0]
    H_el = sp.block_diag([sp.csr_matrix(H), sp.identity(m_i)], format="csc")
    A_eq_el = sp.hstack([A_eq, sp.csr_matrix((A_eq.shape[0], m_i))], format="csr")
    A_in_el = sp.bmat([[A_in, -sp.identity(m_i)], [None, -sp.identity(m_i)]], format="csr")
    c_in_el = np.concatenate([c_in, np.zeros(m_i)])
    g_el = np.concatenate([g, elastic_penalty * np.ones(m_i)])
    elastic = run(H_el, g_el, A_eq_el, c_eq, A_in_el, c_in_el)
    if not elastic.status == OPTIMAL:
        return QpResult(result.d, result.eq_multipliers, result.ineq_multipliers, INFEASIBLE,
                        result.iterations + elastic.iterations, result.active, result.factor)
    return QpResult(elastic.d[:n], elastic.eq_multipliers, elastic.ineq_multipliers[:m_i], ELASTIC,
                    result.iterations + elastic.iterations, [j for j in elastic.active if j < m_i], result.factor)
