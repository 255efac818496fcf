"""Log-domain Sinkhorn solver for the quadratic entropic transport problem.

The cost is fixed to ``c(x, y) = ||x - y||^2 / 2``. Potentials are stored in
the gauge ``sum_j q_j g_j = 0``; the coupling density is
``xi_ij = exp((f_i + g_j - c_ij) / eps)`` so that the optimal plan is
``pi_ij = p_i q_j xi_ij``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoConvergence
from .measures import DiscreteMeasure

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


def cost_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Half squared Euclidean distances between rows of ``x`` and ``y``."""
    diff = x[:, None, :] - y[None, :, :]
    return 0.5 * np.einsum("ijk,ijk->ij", diff, diff)


def _softmin_rows(z: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    # -log sum_j exp(z_ij + log_w_j), stabilized by the row maximum
    a = z + log_w
    m = a.max(axis=1)
    return -(m + np.log(np.exp(a - m[:, None]).sum(axis=1)))


@dataclass(frozen=True)
class SinkhornSolution:
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    cost: float
    xi: np.ndarray
    iterations: int
    residual: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.xi.shape

    def plan(self, P: DiscreteMeasure, Q: DiscreteMeasure) -> np.ndarray:
        return P.weights[:, None] * Q.weights[None, :] * self.xi

    def to_dict(self) -> dict:
        return {
            "f": self.f.tolist(),
            "g": self.g.tolist(),
            "epsilon": self.epsilon,
            "cost": self.cost,
            "residual": self.residual,
            "iterations": self.iterations,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def marginal_residual(xi: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    rows = xi @ q - 1.0
    cols = p @ xi - 1.0
    return float(max(np.abs(rows).max(), np.abs(cols).max()))


def solve(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init_g: np.ndarray | None = None,
) -> SinkhornSolution:
    """Solve the entropic transport dual by alternating soft-min updates.

    Each sweep applies the two optimality relations ``f = -eps log E_Q
    exp((g - c)/eps)`` and ``g = -eps log E_P exp((f - c)/eps)``. Iteration
    stops once the sup-norm change of ``g`` and the marginal residual both
    drop to ``tol``. Raises :class:`NoConvergence` otherwise.
    """
    if P.dim != Q.dim:
        raise DimensionMismatch(f"P lives in R^{P.dim}, Q in R^{Q.dim}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    C = cost_matrix(P.points, Q.points)
    Ce = C / epsilon
    log_p = np.log(P.weights)
    log_q = np.log(Q.weights)
    g = np.zeros(Q.size) if init_g is None else np.array(init_g, dtype=float) / epsilon

    # work with f/eps, g/eps
    residual = np.inf
    it = 0
    while it < max_iter:
        it += 1
        f = _softmin_rows(g[None, :] - Ce, log_q)
        g_new = _softmin_rows(f[None, :] - Ce.T, log_p)
        change = np.abs(g_new - g).max()
        g = g_new
        if change * epsilon <= tol:
            xi = np.exp(f[:, None] + g[None, :] - Ce)
            residual = marginal_residual(xi, P.weights, Q.weights)
            if residual <= tol:
                break
    else:
        xi = np.exp(f[:, None] + g[None, :] - Ce)
        residual = marginal_residual(xi, P.weights, Q.weights)
        if residual > tol:
            raise NoConvergence(residual, it, tol)

    shift = Q.weights @ g
    f = (f + shift) * epsilon
    g = (g - shift) * epsilon
    cost = float(P.weights @ f + Q.weights @ g)
    return SinkhornSolution(
        f=f, g=g, epsilon=float(epsilon), cost=cost, xi=xi,
        iterations=it, residual=float(residual),
    )


def fixed_point_map(
    f: np.ndarray, g: np.ndarray, P: DiscreteMeasure, Q: DiscreteMeasure, epsilon: float
) -> tuple[np.ndarray, np.ndarray]:
    """Apply both optimality relations to ``(f, g)`` independently (no sweep ordering)."""
    Ce = cost_matrix(P.points, Q.points) / epsilon
    f_out = epsilon * _softmin_rows(g[None, :] / epsilon - Ce, np.log(Q.weights))
    g_out = epsilon * _softmin_rows(f[None, :] / epsilon - Ce.T, np.log(P.weights))
    return f_out, g_out


def fixed_point_residual(sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    f_out, g_out = fixed_point_map(sol.f, sol.g, P, Q, sol.epsilon)
    return float(max(np.abs(f_out - sol.f).max(), np.abs(g_out - sol.g).max()))


def extend_f(sol: SinkhornSolution, Q: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
    """Evaluate the source potential at arbitrary points through its soft-min formula."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Ce = cost_matrix(x, Q.points) / sol.epsilon
    return sol.epsilon * _softmin_rows(sol.g[None, :] / sol.epsilon - Ce, np.log(Q.weights))


def extend_g(sol: SinkhornSolution, P: DiscreteMeasure, y: np.ndarray) -> np.ndarray:
    """Evaluate the target potential at arbitrary points through its soft-min formula."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    Ce = cost_matrix(y, P.points) / sol.epsilon
    return sol.epsilon * _softmin_rows(sol.f[None, :] / sol.epsilon - Ce, np.log(P.weights))


def primal_value(sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """Transport cost plus ``eps`` times the relative entropy of the plan to P x Q."""
    pi = sol.plan(P, Q)
    C = cost_matrix(P.points, Q.points)
    return float(np.sum(pi * C) + sol.epsilon * np.sum(pi * np.log(sol.xi)))


def sinkhorn_cost(sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    """Expected half squared distance under the entropic plan (no entropy term)."""
    return float(np.sum(sol.plan(P, Q) * cost_matrix(P.points, Q.points)))


@dataclass(frozen=True)
class DivergenceResult:
    value: float
    pq: SinkhornSolution
    pp: SinkhornSolution
    qq: SinkhornSolution

    def to_dict(self) -> dict:
        return {
            "divergence": self.value,
            "cost_pq": self.pq.cost,
            "cost_pp": self.pp.cost,
            "cost_qq": self.qq.cost,
        }


def sinkhorn_divergence(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> DivergenceResult:
    """Debiased divergence ``S(P,Q) - (S(P,P) + S(Q,Q)) / 2`` with its three solves."""
    pq = solve(P, Q, epsilon, tol, max_iter)
    pp = solve(P, P, epsilon, tol, max_iter)
    qq = solve(Q, Q, epsilon, tol, max_iter)
    return DivergenceResult(pq.cost - 0.5 * (pp.cost + qq.cost), pq, pp, qq)


def xi_to_csv(sol: SinkhornSolution) -> str:
    return "".join(",".join(format(v, ".17g") for v in row) + "\n" for row in sol.xi)
