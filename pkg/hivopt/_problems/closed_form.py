import logging

import jax
import jax.numpy as jnp
from jax import random

from hivopt.defaults import default_seed
from hivopt.problem import NlpProblem


class ClosedFormProblem(NlpProblem):
    """
    Small constrained problems with known solutions, used to check the SQP
    solver independently of the epidemic transcription.

    - 'bound':    min x^2                s.t. x >= 1                         -> x* = 1
    - 'equality': min (x-2)^2 + (y-1)^2  s.t. x + y = 2                      -> (1.5, 0.5)
    - 'product':  min -x y               s.t. x^2 + y^2 <= 2, x, y >= 0       -> (1, 1), multiplier 1/2
    - 'random':   strictly convex QP with m random equalities; x* from the KKT system

    Typical usage example:

    problem = ClosedFormProblem("product")
    result = sqp_solver.solve(problem, x0=problem.x0)
    """

    def __init__(self, problem_type: str, n: int = None, m: int = None, seed: int = default_seed,
                 analytic_derivatives: bool = True) -> None:
        """
        Args:
            problem_type: One of 'bound', 'equality', 'product', 'random'.
            n, m: Dimensions for the 'random' type.
            seed: RNG seed for the 'random' type.
            analytic_derivatives: When False the gradient and Jacobians are
                left out, so the solver falls back to finite differences.

        Raises:
            ValueError: If the problem_type is not recognized or n, m are
                missing for the 'random' type.
        """
        self.problem_type = problem_type
        self.multipliers = None
        if problem_type == "bound":
            n, func, eq, ineq = 1, lambda x: x[0] ** 2, None, None
            lower_bounds = jnp.array([1.0])
            self.x0, x_opt = jnp.array([5.0]), jnp.array([1.0])
            self.multipliers = (None, None, jnp.array([2.0]))
        elif problem_type == "equality":
            n = 2
            func = lambda x: (x[0] - 2.0) ** 2 + (x[1] - 1.0) ** 2
            eq = lambda x: jnp.array([x[0] + x[1] - 2.0])
            ineq, lower_bounds = None, None
            self.x0, x_opt = jnp.array([0.0, 0.0]), jnp.array([1.5, 0.5])
            self.multipliers = (jnp.array([1.0]), None, None)
        elif problem_type == "product":
            n = 2
            func = lambda x: -x[0] * x[1]
            eq = None
            ineq = lambda x: jnp.array([x[0] ** 2 + x[1] ** 2 - 2.0])
            lower_bounds = jnp.zeros(2)
            self.x0, x_opt = jnp.array([0.5, 1.2]), jnp.array([1.0, 1.0])
            self.multipliers = (None, jnp.array([0.5]), jnp.zeros(2))
        elif problem_type == "random":
            if n is None or m is None:
                raise ValueError("For the random problem type, n and m must be provided.")
            func, eq, x_opt = self._generate_data(n, m, seed)
            ineq, lower_bounds = None, None
            self.x0 = jnp.zeros(n)
        else:
            raise ValueError(f"Unknown problem type: {problem_type}")

        super().__init__(
            info=f"Closed-form {problem_type} problem",
            n=n,
            func=func,
            grad=jax.grad(func) if analytic_derivatives else None,
            eq_constraints=eq,
            eq_jacobian=jax.jacfwd(eq) if (analytic_derivatives and eq is not None) else None,
            ineq_constraints=ineq,
            ineq_jacobian=jax.jacfwd(ineq) if (analytic_derivatives and ineq is not None) else None,
            lower_bounds=lower_bounds,
            x_opt=x_opt,
        )

    def _generate_data(self, n: int, m: int, seed: int):
        """
        f(x) = 1/2 x'Qx + q'x with Q = M'M + I, subject to A x = b.

        Returns:
            func, eq, x_opt
        """
        if m >= n:
            raise ValueError(f"Need fewer equalities than variables, got m={m}, n={n}")
        keys = random.split(random.PRNGKey(seed), 4)
        M = random.normal(keys[0], (n, n))
        Q = M.T @ M + jnp.eye(n)
        q = random.normal(keys[1], (n,))
        A = random.normal(keys[2], (m, n))
        b = random.normal(keys[3], (m,))
        logging.debug(f"Generating random equality-constrained QP with n={n}, m={m}.")

        K = jnp.block([[Q, A.T], [A, jnp.zeros((m, m))]])
        sol = jnp.linalg.solve(K, jnp.concatenate([-q, b]))
        self.multipliers = (sol[n:], None, None)
        return (lambda x: 0.5 * x @ Q @ x + q @ x), (lambda x: A @ x - b), sol[:n]
