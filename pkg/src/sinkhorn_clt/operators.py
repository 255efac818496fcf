"""Dense kernel operators of an entropic plan and their Fredholm resolvents.

For a solution with coupling density ``xi`` between P (n atoms) and Q
(m atoms):

* ``KQ = xi * q`` (n x m) integrates a Q-function against ``xi(x, .) dQ``
  and returns a P-function;
* ``KP = (xi * p).T`` (m x n) integrates a P-function against
  ``xi(., y) dP`` and returns a Q-function.

Constants are fixed points of both, so ``I - KQ KP`` and ``I - KP KQ`` are
singular. They are inverted on weighted-mean-zero vectors through the rank-one
deflation ``I - K + 1 w^T``, which is invertible and maps centered vectors to
the centered solution.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import NonSymmetric, NotCentered, NotSelfTransport, SingularSystem
from .measures import DiscreteMeasure
from .sinkhorn import SinkhornSolution

CENTER_TOL = 1e-8
ASYMMETRY_WARN = 1e-8
RCOND_MIN = 1e-13

X_SIDE = "x"
Y_SIDE = "y"


@dataclass(frozen=True)
class ResolventSystem:
    """LU factorization of the deflated matrix ``I - K + 1 w^T`` for one side."""

    side: str
    K: np.ndarray
    weights: np.ndarray
    lu: tuple

    @classmethod
    def build(cls, side: str, K: np.ndarray, weights: np.ndarray) -> "ResolventSystem":
        n = len(weights)
        A = np.eye(n) - K + np.outer(np.ones(n), weights)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
        diag = np.abs(np.diag(lu))
        if diag.min() <= RCOND_MIN * max(diag.max(), 1.0):
            raise SingularSystem(
                f"deflated {side}-side resolvent is singular (min pivot {diag.min():.2e})"
            )
        return cls(side, K, weights, (lu, piv))

    def solve(self, v, check: bool = True) -> np.ndarray:
        """Return the centered ``u`` with ``(I - K) u = v`` for centered ``v``."""
        v = np.asarray(v, dtype=float)
        if check:
            mean = self.weights @ v
            scale = max(1.0, float(np.abs(v).max(initial=0.0)))
            if np.any(np.abs(mean) > CENTER_TOL * scale):
                raise NotCentered(
                    f"right-hand side has weighted mean {np.max(np.abs(mean)):.3e}"
                )
        return scipy.linalg.lu_solve(self.lu, v, check_finite=False)

    def matrix(self) -> np.ndarray:
        """Resolvent as a matrix acting on any vector after centering it first."""
        n = len(self.weights)
        projector = np.eye(n) - np.outer(np.ones(n), self.weights)
        return scipy.linalg.lu_solve(self.lu, projector, check_finite=False)


@dataclass(frozen=True)
class KernelOperators:
    KQ: np.ndarray
    KP: np.ndarray
    p: np.ndarray
    q: np.ndarray
    epsilon: float
    self_transport: bool = False

    @cached_property
    def x_side(self) -> ResolventSystem:
        return ResolventSystem.build(X_SIDE, self.KQ @ self.KP, self.p)

    @cached_property
    def y_side(self) -> ResolventSystem:
        return ResolventSystem.build(Y_SIDE, self.KP @ self.KQ, self.q)

    def resolvent(self, side: str) -> ResolventSystem:
        if side == X_SIDE:
            return self.x_side
        if side == Y_SIDE:
            return self.y_side
        raise ValueError(f"side must be {X_SIDE!r} or {Y_SIDE!r}, got {side!r}")

    def apply_AQ(self, b) -> np.ndarray:
        return self.KQ @ np.asarray(b, dtype=float)

    def apply_AP(self, a) -> np.ndarray:
        return self.KP @ np.asarray(a, dtype=float)

    def invariant_errors(self) -> dict:
        """Deviation of the constant-preservation and adjointness identities."""
        rows_q = np.abs(self.KQ.sum(axis=1) - 1).max()
        rows_p = np.abs(self.KP.sum(axis=1) - 1).max()
        # adjointness is exact at matrix level: diag(p) KQ = (diag(q) KP)^T
        adj = np.abs(self.p[:, None] * self.KQ - (self.q[:, None] * self.KP).T).max()
        return {"KQ_rows": float(rows_q), "KP_rows": float(rows_p), "adjoint": float(adj)}


def build_operators(
    sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure
) -> KernelOperators:
    p, q = P.weights, Q.weights
    KQ = sol.xi * q[None, :]
    KP = (sol.xi * p[:, None]).T
    ops = KernelOperators(
        KQ=KQ, KP=KP, p=p, q=q, epsilon=sol.epsilon,
        self_transport=P.equals(Q),
    )
    errs = ops.invariant_errors()
    bound = max(1e-8, 10 * sol.residual)
    if errs["KQ_rows"] > bound or errs["KP_rows"] > bound:
        raise ValueError(f"solution is not converged enough for operators: {errs}")
    return ops


def resolvent_solve(ops: KernelOperators, side: str, v) -> np.ndarray:
    """Solve ``(1 - A_Q A_P) u = v`` (side ``"x"``) or ``(1 - A_P A_Q) u = v`` (side ``"y"``)."""
    return ops.resolvent(side).solve(v)


def _sym_eigvals(K: np.ndarray, w: np.ndarray) -> np.ndarray:
    s = np.sqrt(w)
    S = s[:, None] * K / s[None, :]
    asym = np.abs(S - S.T).max()
    if asym > 1e-6:
        raise NonSymmetric(f"operator is not self-adjoint in L2(w): asymmetry {asym:.2e}")
    if asym > ASYMMETRY_WARN:
        warnings.warn(f"symmetrization residual {asym:.2e}", RuntimeWarning, stacklevel=3)
    return np.sort(np.linalg.eigvalsh(0.5 * (S + S.T)))[::-1]


def operator_spectrum(ops: KernelOperators, which: str) -> np.ndarray:
    """Eigenvalues, in descending order, of ``"AQAP"``, ``"APAQ"`` or ``"self"``.

    The composites are self-adjoint in ``L2(P)`` and ``L2(Q)`` respectively and
    are diagonalized after the similarity ``D^(1/2) K D^(-1/2)``. ``"self"`` is
    the single operator ``A_P`` of a self-transport problem (P = Q).
    """
    if which == "AQAP":
        return _sym_eigvals(ops.KQ @ ops.KP, ops.p)
    if which == "APAQ":
        return _sym_eigvals(ops.KP @ ops.KQ, ops.q)
    if which == "self":
        if not ops.self_transport:
            raise NotSelfTransport("the self operator needs P and Q to coincide")
        return _sym_eigvals(ops.KP, ops.p)
    raise ValueError(f"unknown operator {which!r}")


def spectrum_to_json(eigenvalues) -> str:
    return json.dumps({"eigenvalues": [float(v) for v in eigenvalues]})
