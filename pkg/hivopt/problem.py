from typing import Callable, Optional

import jax.numpy as jnp


class Problem:
    """
    The base class for optimization problems.

    Attributes:
        info (str): Brief information about the problem.
        f (Callable): Target function to be minimized.
        x_opt (Any, optional): Known optimal solution.
        f_opt (Any, optional): Optimal function value corresponding to x_opt.
    """

    info: str           # Brief information about the problem, such as a common name
    f: Callable         # Target function
    x_opt: any = None   # Problem's optimizer (optional)
    f_opt: any = None   # f(x_opt)

    def __init__(self, info: str, func: Callable, x_opt=None, f_opt=None) -> None:
        """
        Initialize the Problem instance.

        Args:
            info (str): Brief information about the problem.
            func (Callable): Target function to be minimized.
            x_opt (Any, optional): Known optimal solution.
            f_opt (Any, optional): Known optimal value; computed from x_opt if omitted.
        """
        self.info = info
        self.f = func
        self.x_opt = x_opt
        self.f_opt = f_opt
        if self.x_opt is not None and self.f_opt is None:
            self.f_opt = float(self.f(jnp.asarray(self.x_opt, dtype=float)))

    def __str__(self) -> str:
        return self.info


class NlpProblem(Problem):
    """
    A smooth constrained problem in the form the SQP solver consumes:

        min f(x)  s.t.  c_eq(x) = 0,  c_ineq(x) <= 0,  x >= lower_bounds

    Gradient and Jacobians are optional. Missing ones are formed by centered
    finite differences inside the solver, restricted to the declared
    sparsity patterns when those are given.
    """

    def __init__(
        self,
        info: str,
        n: int,
        func: Callable,
        grad: Optional[Callable] = None,
        eq_constraints: Optional[Callable] = None,
        eq_jacobian: Optional[Callable] = None,
        ineq_constraints: Optional[Callable] = None,
        ineq_jacobian: Optional[Callable] = None,
        lower_bounds=None,
        eq_sparsity=None,
        ineq_sparsity=None,
        hessian_blocks=None,
        x_opt=None,
        f_opt=None,
    ) -> None:
        """
        Args:
            info: Brief information about the problem.
            n: Number of decision variables.
            func: Objective, R^n -> R.
            grad: Objective gradient, R^n -> R^n.
            eq_constraints: Equality residuals, R^n -> R^{m_eq}.
            eq_jacobian: Their Jacobian, R^n -> R^{m_eq x n}.
            ineq_constraints: Inequality values (feasible when <= 0).
            ineq_jacobian: Their Jacobian.
            lower_bounds: Length-n array, -inf where a variable is free.
            eq_sparsity: Boolean (m_eq, n) structural pattern.
            ineq_sparsity: Boolean (m_ineq, n) structural pattern.
            hessian_blocks: Disjoint index arrays covering all variables; the
                Lagrangian Hessian is known to vanish across blocks.
            x_opt: Known optimum, if any.
            f_opt: Known optimal value, if any.
        """
        self.n = n
        self.grad_fun = grad
        self.eq_fun = eq_constraints
        self.eq_jac = eq_jacobian
        self.ineq_fun = ineq_constraints
        self.ineq_jac = ineq_jacobian
        if lower_bounds is None:
            lower_bounds = jnp.full((n,), -jnp.inf)
        self.lower_bounds = jnp.asarray(lower_bounds, dtype=float)
        self.eq_sparsity = eq_sparsity
        self.ineq_sparsity = ineq_sparsity
        self.hessian_blocks = hessian_blocks
        if self.lower_bounds.shape != (n,):
            raise ValueError(f"lower_bounds must be of shape ({n},), not {self.lower_bounds.shape}")
        super().__init__(info=info, func=func, x_opt=x_opt, f_opt=f_opt)

    @property
    def has_eq(self) -> bool:
        return self.eq_fun is not None

    @property
    def has_ineq(self) -> bool:
        return self.ineq_fun is not None
