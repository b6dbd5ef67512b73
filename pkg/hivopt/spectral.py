"""
Legendre-Gauss-Radau machinery: points, quadrature weights, barycentric
interpolation and the rectangular differentiation matrix used by the
collocation transcription.

Everything lives on the reference interval [-1, 1]. The scheme is built once
and shared by every control interval; only the factor dt / 2 enters
downstream.
"""
import logging
from typing import Tuple

import jax.numpy as jnp
import numpy as np
import scipy.optimize as opt
from flax import struct


class LgrConstructionError(RuntimeError):
    """Root finding, the quadrature self-check or a formula cross-check failed."""


def _legendre_table(n: int, theta) -> Tuple[jnp.ndarray, jnp.ndarray, jnp.ndarray]:
    """
    Values, first and second derivatives of P_0..P_n at theta.

    Returns three arrays of shape (n + 1,) + theta.shape.
    """
    theta = jnp.asarray(theta, dtype=float)
    ones = jnp.ones_like(theta)
    zeros = jnp.zeros_like(theta)
    P, dP, ddP = [ones], [zeros], [zeros]
    if n >= 1:
        P.append(theta)
        dP.append(ones)
        ddP.append(zeros)
    for j in range(1, n):
        P.append(((2 * j + 1) * theta * P[j] - j * P[j - 1]) / (j + 1))
        dP.append(dP[j - 1] + (2 * j + 1) * P[j])
        ddP.append(ddP[j - 1] + (2 * j + 1) * dP[j])
    return jnp.stack(P), jnp.stack(dP), jnp.stack(ddP)


def legendre_eval(k: int, theta) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """
    Legendre polynomial P_k normalized by P_k(1) = 1, and its derivative.

    Args:
        k: Degree, k >= 0.
        theta: Abscissa (scalar or array) in [-1, 1].

    Returns:
        (P_k(theta), P_k'(theta))
    """
    if k < 0:
        raise ValueError(f"Legendre degree must be nonnegative, got {k}")
    P, dP, _ = _legendre_table(k, theta)
    return P[k], dP[k]


def _radau_polynomial(n_cp: int, theta):
    """g = P_{n+1} + P_n and its first two derivatives."""
    P, dP, ddP = _legendre_table(n_cp + 1, theta)
    return P[n_cp + 1] + P[n_cp], dP[n_cp + 1] + dP[n_cp], ddP[n_cp + 1] + ddP[n_cp]


def _bracketed_roots(n_cp: int, tol: float) -> np.ndarray:
    """Interior roots of g by sign changes on a fine grid, refined by bisection."""
    grid = np.linspace(-1.0, 1.0, 200 * (n_cp + 1) + 1)[1:]
    values = np.asarray(_radau_polynomial(n_cp, grid)[0])
    roots = []
    for left, right, v_left, v_right in zip(grid[:-1], grid[1:], values[:-1], values[1:]):
        if v_left == 0.0:
            roots.append(left)
        elif v_left * v_right < 0.0:
            roots.append(opt.bisect(
                lambda t: float(_radau_polynomial(n_cp, t)[0]), left, right, xtol=tol, rtol=4 * np.finfo(float).eps
            ))
    return np.asarray(roots)


def lgr_points(n_cp: int, tol: float = 1e-14, max_iter: int = 100, residual_tol: float = 1e-13) -> jnp.ndarray:
    """
    The n_cp + 1 roots of P_{n_cp+1} + P_{n_cp}, ascending, first one exactly -1.

    Newton iteration from Chebyshev-Gauss-Radau guesses; if it stalls or
    produces coincident roots, the interior roots are bracketed on a fine
    grid and bisected.
    """
    if n_cp < 1:
        raise ValueError(f"Number of collocation points must be at least 1, got {n_cp}")
    k = jnp.arange(1, n_cp + 1)
    theta = -jnp.cos(2.0 * jnp.pi * k / (2 * n_cp + 1))

    converged = False
    for _ in range(max_iter):
        g, dg, _ = _radau_polynomial(n_cp, theta)
        # Newton on g / (1 + theta) so no iterate is drawn to the known root -1
        step = g * (1.0 + theta) / (dg * (1.0 + theta) - g)
        theta = theta - step
        if float(jnp.max(jnp.abs(step))) < tol:
            converged = True
            break

    interior = np.sort(np.asarray(theta))
    sane = (
        converged
        and np.all(np.isfinite(interior))
        and np.all(np.diff(interior) > 0)
        and interior[0] > -1.0
        and interior[-1] < 1.0
    )
    if not sane:
        logging.warning(msg=f"Newton iteration for {n_cp} LGR points did not settle, falling back to bisection.")
        interior = _bracketed_roots(n_cp, tol)
        if interior.shape != (n_cp,):
            raise LgrConstructionError(f"Found {interior.shape[0]} interior LGR roots, expected {n_cp}")

    points = jnp.concatenate([jnp.array([-1.0]), jnp.asarray(interior)])
    residual = float(jnp.max(jnp.abs(_radau_polynomial(n_cp, points)[0])))
    if residual >= residual_tol:
        raise LgrConstructionError(f"LGR root residual {residual:.2e} exceeds {residual_tol:.0e} for n_cp={n_cp}")
    return points


def _moment_weights(points) -> jnp.ndarray:
    """Weights solving sum_k w_k P_j(theta_k) = 2 delta_j0, j = 0..n_cp."""
    n_cp = points.shape[0] - 1
    P, _, _ = _legendre_table(n_cp, points)
    rhs = jnp.zeros(n_cp + 1).at[0].set(2.0)
    return jnp.linalg.solve(P, rhs)


def lgr_weights(points, check_tol: float = 1e-11, moment_check_max: int = 20) -> jnp.ndarray:
    """
    Radau quadrature weights, exact for polynomials of degree <= 2 n_cp.

    The closed form w_0 = 2 / (n+1)^2, w_k = (1 - theta_k) / ((n+1) P_n(theta_k))^2
    is cross-checked against the Legendre moment system (small n_cp) and then
    tested for exactness on P_0..P_{2 n_cp}.
    """
    points = jnp.asarray(points, dtype=float)
    n_cp = points.shape[0] - 1
    P, _, _ = _legendre_table(2 * n_cp, points)
    weights = (1.0 - points) / ((n_cp + 1) * P[n_cp]) ** 2
    weights = weights.at[0].set(2.0 / (n_cp + 1) ** 2)

    if n_cp <= moment_check_max:
        gap = float(jnp.max(jnp.abs(weights - _moment_weights(points))))
        if gap > check_tol:
            raise LgrConstructionError(f"Closed-form and moment weights differ by {gap:.2e}")

    # int_{-1}^{1} P_j = 2 delta_j0
    exact = jnp.zeros(2 * n_cp + 1).at[0].set(2.0)
    error = float(jnp.max(jnp.abs(P @ weights - exact)))
    if error > check_tol:
        raise LgrConstructionError(f"Quadrature is not exact to degree {2 * n_cp}: error {error:.2e}")
    return weights


def barycentric_weights(points) -> jnp.ndarray:
    """w_j = 1 / prod_{k != j} (x_j - x_k), normalized to unit max-norm."""
    points = jnp.asarray(points, dtype=float)
    diff = points[:, None] - points[None, :]
    diff = jnp.where(jnp.eye(points.shape[0], dtype=bool), 1.0, diff)
    # the interval length 2 is factored out to keep products near unity
    w = 1.0 / jnp.prod(diff / 2.0, axis=1)
    return w / jnp.max(jnp.abs(w))


def full_differentiation_matrix(points) -> jnp.ndarray:
    """Square barycentric differentiation matrix over all n_cp + 1 points."""
    points = jnp.asarray(points, dtype=float)
    n = points.shape[0]
    w = barycentric_weights(points)
    eye = jnp.eye(n, dtype=bool)
    diff = jnp.where(eye, 1.0, points[:, None] - points[None, :])
    D = jnp.where(eye, 0.0, (w[None, :] / w[:, None]) / diff)
    # negative-sum trick for the diagonal
    return D - jnp.diag(jnp.sum(D, axis=1))


def closed_form_differentiation_matrix(points) -> jnp.ndarray:
    """
    Lagrange-basis derivatives from the Radau polynomial g = P_{n+1} + P_n:

        off-diagonal   g'(t_k) / ((t_k - t_j) g'(t_j))
        [0, 0]         -n (n + 2) / 4
        diagonal k>0   g''(t_k) / (2 g'(t_k))
    """
    points = jnp.asarray(points, dtype=float)
    n_cp = points.shape[0] - 1
    _, dg, ddg = _radau_polynomial(n_cp, points)
    eye = jnp.eye(n_cp + 1, dtype=bool)
    diff = jnp.where(eye, 1.0, points[:, None] - points[None, :])
    D = jnp.where(eye, 0.0, dg[:, None] / (diff * dg[None, :]))
    diagonal = (ddg / (2.0 * dg)).at[0].set(-n_cp * (n_cp + 2) / 4.0)
    return D + jnp.diag(diagonal)


def differentiation_matrix(points, check_tol: float = 1e-9) -> jnp.ndarray:
    """
    D[k-1, l] = derivative of the l-th Lagrange basis polynomial at collocation
    point k = 1..n_cp. Shape (n_cp, n_cp + 1); the knot point is not collocated.
    """
    full = full_differentiation_matrix(points)
    explicit = closed_form_differentiation_matrix(points)
    scale = max(1.0, float(jnp.max(jnp.abs(full))))
    gap = float(jnp.max(jnp.abs(full - explicit))) / scale
    if gap > check_tol:
        raise LgrConstructionError(f"Barycentric and closed-form differentiation disagree by {gap:.2e}")
    return full[1:, :]


def interpolation_matrix(points, t) -> jnp.ndarray:
    """
    Lagrange basis values l_j(t), shape t.shape + (n_cp + 1,), in the second
    (true) barycentric form. Rows at a node are exact unit vectors.
    """
    points = jnp.asarray(points, dtype=float)
    t = jnp.asarray(t, dtype=float)
    w = barycentric_weights(points)
    diff = t[..., None] - points
    hit = diff == 0.0
    safe = jnp.where(hit, 1.0, diff)
    terms = w / safe
    basis = terms / jnp.sum(terms, axis=-1, keepdims=True)
    exact = hit.astype(float)
    return jnp.where(jnp.any(hit, axis=-1, keepdims=True), exact, basis)


def interpolate(points, values, t) -> jnp.ndarray:
    """
    Evaluate the degree-n_cp interpolant through (points, values) at t.

    values may carry trailing axes, e.g. shape (n_cp + 1, 9) for a state block.
    """
    values = jnp.asarray(values, dtype=float)
    if values.shape[0] != jnp.shape(points)[0]:
        raise ValueError(f"Expected {jnp.shape(points)[0]} values, got {values.shape[0]}")
    return jnp.tensordot(interpolation_matrix(points, t), values, axes=1)


@struct.dataclass
class LgrScheme:
    """
    Immutable LGR scheme on [-1, 1].

    Attributes:
        n_cp: Number of collocation points.
        points: n_cp + 1 abscissae, points[0] = -1.
        weights: n_cp + 1 positive quadrature weights summing to 2.
        diff_matrix: (n_cp, n_cp + 1) differentiation matrix.
    """
    n_cp: int = struct.field(pytree_node=False)
    points: jnp.ndarray
    weights: jnp.ndarray
    diff_matrix: jnp.ndarray

    @classmethod
    def build(cls, n_cp: int) -> "LgrScheme":
        points = lgr_points(n_cp)
        scheme = cls(
            n_cp=n_cp,
            points=points,
            weights=lgr_weights(points),
            diff_matrix=differentiation_matrix(points),
        )
        logging.debug(msg=f"Built LGR scheme with {n_cp} collocation points: {points}")
        return scheme

    def interpolate(self, values, t) -> jnp.ndarray:
        return interpolate(self.points, values, t)
