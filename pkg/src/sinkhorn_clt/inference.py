"""Plug-in asymptotic variances, confidence intervals and the H0 limit law.

Every variance here is a first-order (delta-method) quantity built from a
converged :class:`~sinkhorn_clt.sinkhorn.SinkhornSolution` and its
:class:`~sinkhorn_clt.operators.KernelOperators`. When the measures passed in
are empirical, the same formulas give the plug-in estimates.

Sampling regimes are encoded by ``lam``: ``None`` is the one-sample case (only
P is sampled, Q is known), a float in (0, 1) is the limit of ``m / (n + m)``
in the two-sample case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import DimensionMismatch, NonSymmetric
from .measures import DiscreteMeasure
from .operators import KernelOperators, build_operators
from .sinkhorn import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DivergenceResult,
    SinkhornSolution,
    cost_matrix,
    sinkhorn_divergence,
    solve,
)

CLIP_TOL = 1e-10
SYMMETRY_TOL = 1e-6

# -- standard normal ---------------------------------------------------------

_STD_NORMAL = NormalDist()


def normal_quantile(prob: float) -> float:
    """Inverse of the standard normal CDF."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    return _STD_NORMAL.inv_cdf(prob)


def normal_cdf(x: float) -> float:
    return _STD_NORMAL.cdf(x)


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class InferenceReport:
    estimate: float
    sigma2: float
    rate: float
    ci_low: float
    ci_high: float
    level: float
    lam: float | None
    kind: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def one_sample(self) -> bool:
        return self.lam is None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "estimate": self.estimate,
            "sigma2": self.sigma2,
            "rate": self.rate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "lambda": "one-sample" if self.lam is None else self.lam,
            "warnings": list(self.warnings),
        }


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")


def make_report(
    estimate: float,
    sigma2: float,
    rate: float,
    level: float,
    lam: float | None,
    kind: str = "",
    warnings: tuple[str, ...] = (),
) -> InferenceReport:
    """Normal-approximation interval ``estimate +- z * sqrt(sigma2 / rate)``."""
    _check_level(level)
    sigma2 = max(float(sigma2), 0.0)
    half = normal_quantile(0.5 + level / 2) * math.sqrt(sigma2 / rate)
    return InferenceReport(
        estimate=float(estimate), sigma2=sigma2, rate=float(rate),
        ci_low=float(estimate) - half, ci_high=float(estimate) + half,
        level=level, lam=lam, kind=kind, warnings=tuple(warnings),
    )


def sampling_rate(n: int, m: int | None = None) -> float:
    """``n`` in the one-sample case, ``n m / (n + m)`` otherwise."""
    if n < 1 or (m is not None and m < 1):
        raise ValueError("sample sizes must be positive")
    return float(n) if m is None else n * m / (n + m)


def _check_lambda(lam: float | None) -> None:
    if lam is not None and not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")


# -- coupling functionals ----------------------------------------------------


@dataclass(frozen=True)
class FunctionalSpec:
    """A test function ``eta(x, y)`` integrated against the entropic plan.

    ``kind`` is one of ``"half-squared-distance"``, ``"threshold"`` (payload:
    threshold ``t``, ``eta = 1{||x - y||^2 <= t}``), ``"constant"`` (payload:
    the constant) or ``"matrix"`` (payload: an explicit n x m array).
    """

    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in ("half-squared-distance", "threshold", "constant", "matrix"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "threshold" and not float(self.payload) >= 0:
            raise ValueError("threshold must be nonnegative")

    @classmethod
    def half_squared_distance(cls) -> "FunctionalSpec":
        return cls("half-squared-distance")

    @classmethod
    def threshold(cls, t: float) -> "FunctionalSpec":
        return cls("threshold", float(t))

    @classmethod
    def constant(cls, c: float) -> "FunctionalSpec":
        return cls("constant", float(c))

    @classmethod
    def matrix(cls, values) -> "FunctionalSpec":
        arr = np.array(values, dtype=float)
        if arr.ndim != 2:
            raise DimensionMismatch("an explicit functional must be a 2-d matrix")
        arr.setflags(write=False)
        return cls("matrix", arr)

    def evaluate(self, P: DiscreteMeasure, Q: DiscreteMeasure) -> np.ndarray:
        shape = (P.size, Q.size)
        if self.kind == "half-squared-distance":
            return cost_matrix(P.points, Q.points)
        if self.kind == "threshold":
            return (2 * cost_matrix(P.points, Q.points) <= self.payload).astype(float)
        if self.kind == "constant":
            return np.full(shape, self.payload)
        if self.payload.shape != shape:
            raise DimensionMismatch(
                f"functional matrix has shape {self.payload.shape}, measures need {shape}"
            )
        return np.asarray(self.payload)


def _eta_matrix(eta, P, Q, shape) -> np.ndarray:
    if isinstance(eta, FunctionalSpec):
        if P is None or Q is None:
            raise ValueError("measures are required to evaluate a FunctionalSpec")
        return eta.evaluate(P, Q)
    arr = np.asarray(eta, dtype=float)
    if arr.shape != shape:
        raise DimensionMismatch(f"functional matrix has shape {arr.shape}, expected {shape}")
    return arr


def eta_marginals(eta, sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure):
    """Conditional expectations of ``eta`` under the plan.

    Returns ``(eta_x, eta_y)`` with ``eta_x[i] = sum_j q_j xi_ij eta_ij`` and
    ``eta_y[j] = sum_i p_i xi_ij eta_ij``.
    """
    E = _eta_matrix(eta, P, Q, sol.shape) * sol.xi
    return E @ Q.weights, P.weights @ E


def functional_value(eta, sol: SinkhornSolution, P: DiscreteMeasure, Q: DiscreteMeasure) -> float:
    return float(np.sum(sol.plan(P, Q) * _eta_matrix(eta, P, Q, sol.shape)))


def functional_influence(eta, sol: SinkhornSolution, ops: KernelOperators, P=None, Q=None):
    """Centered influence functions of ``pi(eta)`` on the P- and Q-atoms.

    ``u_x = (1 - A_Q A_P)^(-1) (eta_x - A_Q eta_y)`` and symmetrically for
    ``u_y``. The right-hand sides are centered before the resolvent is applied.
    """
    E = _eta_matrix(eta, P, Q, sol.shape) * sol.xi
    eta_x = E @ ops.q
    eta_y = ops.p @ E
    vx = eta_x - ops.KQ @ eta_y
    vy = eta_y - ops.KP @ eta_x
    vx = vx - ops.p @ vx
    vy = vy - ops.q @ vy
    ux = ops.x_side.solve(vx, check=False)
    uy = ops.y_side.solve(vy, check=False)
    return ux, uy


def _weighted_var(w: np.ndarray, v: np.ndarray) -> float:
    c = v - w @ v
    return float(w @ (c * c))


def functional_variance(
    eta, sol: SinkhornSolution, ops: KernelOperators, lam: float | None = None,
    P: DiscreteMeasure | None = None, Q: DiscreteMeasure | None = None,
) -> float:
    """Asymptotic variance of the plan functional ``pi(eta)``.

    ``lam * Var_P(u_x) + (1 - lam) * Var_Q(u_y)``, or ``Var_P(u_x)`` alone
    in the one-sample case (``lam=None``).
    """
    _check_lambda(lam)
    ux, uy = functional_influence(eta, sol, ops, P, Q)
    var_x = _weighted_var(ops.p, ux)
    if lam is None:
        return var_x
    return lam * var_x + (1 - lam) * _weighted_var(ops.q, uy)


def functional_ci(
    eta,
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    epsilon: float,
    level: float,
    n: int,
    m: int | None = None,
    lam: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    kind: str = "functional",
) -> InferenceReport:
    """Plug-in confidence interval for ``pi(eta)`` from empirical measures.

    ``P`` (and ``Q`` when ``m`` is given) are treated as empirical measures of
    samples of size ``n`` (and ``m``). In the two-sample case ``lam`` defaults
    to ``m / (n + m)``.
    """
    _check_level(level)
    if m is not None and lam is None:
        lam = m / (n + m)
    if m is None and lam is not None:
        raise ValueError("lambda applies to the two-sample case only; pass m")
    _check_lambda(lam)
    sol = solve(P, Q, epsilon, tol, max_iter)
    ops = build_operators(sol, P, Q)
    E = _eta_matrix(eta, P, Q, sol.shape)
    estimate = functional_value(E, sol, P, Q)
    sigma2 = functional_variance(E, sol, ops, lam)
    return make_report(estimate, sigma2, sampling_rate(n, m), level, lam, kind)


def sinkhorn_cost_ci(P, Q, epsilon, level, n, m=None, lam=None, **kw) -> InferenceReport:
    return functional_ci(FunctionalSpec.half_squared_distance(), P, Q, epsilon, level,
                         n, m, lam, kind="ds", **kw)


def rcol_ci(P, Q, epsilon, t, level, n, m=None, lam=None, **kw) -> InferenceReport:
    return functional_ci(FunctionalSpec.threshold(t), P, Q, epsilon, level,
                         n, m, lam, kind="rcol", **kw)


# -- entropic cost -------------------------------------------------------------


def cost_variance_one_sample(sol: SinkhornSolution, P: DiscreteMeasure) -> float:
    """``Var_P(f)``: asymptotic variance of ``S(P_n, Q)`` when Q is known."""
    return _weighted_var(P.weights, sol.f)


def cost_ci(P, Q, epsilon, level, n, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> InferenceReport:
    sol = solve(P, Q, epsilon, tol, max_iter)
    return make_report(sol.cost, cost_variance_one_sample(sol, P), float(n), level, None, "cost")


# -- Sinkhorn divergence under H1 ---------------------------------------------


def divergence_psi(div: DivergenceResult):
    """Influence functions of the divergence on the P-atoms and on the Q-atoms."""
    psi_pq = div.pq.f - 0.5 * (div.pp.f + div.pp.g)
    psi_qp = div.pq.g - 0.5 * (div.qq.f + div.qq.g)
    return psi_pq, psi_qp


def divergence_h1_variance(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    epsilon: float,
    lam: float | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    result: DivergenceResult | None = None,
):
    """Variance of the Gaussian limit of the divergence when P != Q.

    Returns ``(sigma2, psi_pq, psi_qp)``. Pass ``result`` to reuse the three
    solves of an earlier :func:`sinkhorn_divergence` call.
    """
    _check_lambda(lam)
    if result is None:
        result = sinkhorn_divergence(P, Q, epsilon, tol, max_iter)
    psi_pq, psi_qp = divergence_psi(result)
    var_p = _weighted_var(P.weights, psi_pq)
    if lam is None:
        return var_p, psi_pq, psi_qp
    return lam * var_p + (1 - lam) * _weighted_var(Q.weights, psi_qp), psi_pq, psi_qp


DEGENERATE_H1 = (
    "P and Q coincide, so the limit is degenerate and H1 inference does not apply; "
    "use the H0 test instead"
)


def divergence_ci(P, Q, epsilon, level, n, m=None, lam=None,
                  tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> InferenceReport:
    if m is not None and lam is None:
        lam = m / (n + m)
    if m is None and lam is not None:
        raise ValueError("lambda applies to the two-sample case only; pass m")
    result = sinkhorn_divergence(P, Q, epsilon, tol, max_iter)
    sigma2, _, _ = divergence_h1_variance(P, Q, epsilon, lam, result=result)
    warns = (DEGENERATE_H1,) if P.equals(Q, tol=1e-12) else ()
    return make_report(result.value, sigma2, sampling_rate(n, m), level, lam,
                       "divergence", warns)


# -- Sinkhorn divergence under H0 ---------------------------------------------

SECOND_ORDER = "second-order"
OPERATOR_FORM = "operator-product"


@dataclass(frozen=True)
class H0Spectrum:
    """Weights ``mu_j`` of the limit law ``sum_j mu_j N_j^2`` (descending)."""

    weights: np.ndarray
    epsilon: float
    form: str = SECOND_ORDER

    @property
    def mean(self) -> float:
        return float(np.sum(self.weights))

    @property
    def variance(self) -> float:
        return float(2 * np.sum(self.weights**2))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "epsilon": self.epsilon, "form": self.form}


def _centered_sqrt_basis(p: np.ndarray) -> np.ndarray:
    """Columns ``V s^(1/2)`` spanning the range of ``diag(p) - p p^T``."""
    cov = np.diag(p) - np.outer(p, p)
    s, V = np.linalg.eigh(cov)
    keep = s > 1e-14 * max(s.max(initial=0.0), 1e-300)
    return V[:, keep] * np.sqrt(s[keep])


def h0_quadratic_form(sol: SinkhornSolution, ops: KernelOperators, form: str = SECOND_ORDER) -> np.ndarray:
    """Matrix ``M`` with ``n D(P_n, P) -> Z^T M Z``, ``Z ~ N(0, diag(p) - p p^T)``.

    ``"second-order"`` is the Taylor expansion of the divergence,
    ``(eps / 2) (1 - A^2)^(-1) Xi``. ``"operator-product"`` is the operator expression
    ``(1/4) (1 - A^2)^(-1) (1 + 2A) Xi`` evaluated without an ``eps`` factor.
    Both resolvents act on centered vectors only.
    """
    if not ops.self_transport:
        raise ValueError("the H0 limit needs a self-transport solution (P = P)")
    R = ops.x_side.matrix()
    if form == SECOND_ORDER:
        return 0.5 * sol.epsilon * (R @ sol.xi)
    if form == OPERATOR_FORM:
        n = len(ops.p)
        return 0.25 * (R @ ((np.eye(n) + 2 * ops.KP) @ sol.xi))
    raise ValueError(f"unknown H0 form {form!r}")


def h0_limit_spectrum(
    P: DiscreteMeasure,
    epsilon: float,
    form: str = SECOND_ORDER,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> H0Spectrum:
    """Chi-square-mixture weights of the degenerate divergence limit under H0.

    Diagonalizes ``Z^T M Z`` with ``Z = Sigma^(1/2) N`` on the
    ``(n - 1)``-dimensional range of ``Sigma = diag(p) - p p^T``.
    """
    sol = solve(P, P, epsilon, tol, max_iter)
    ops = build_operators(sol, P, P)
    M = h0_quadratic_form(sol, ops, form)
    B = _centered_sqrt_basis(P.weights)
    if B.shape[1] == 0:
        return H0Spectrum(np.zeros(0), float(epsilon), form)
    W = B.T @ M @ B
    scale = max(np.abs(W).max(), 1e-300)
    asym = np.abs(W - W.T).max()
    if asym > SYMMETRY_TOL * scale:
        raise NonSymmetric(f"H0 quadratic form asymmetry {asym:.2e}")
    mu = np.sort(np.linalg.eigvalsh(0.5 * (W + W.T)))[::-1]
    if mu[-1] < -CLIP_TOL:
        raise NonSymmetric(f"H0 quadratic form has negative eigenvalue {mu[-1]:.3e}")
    return H0Spectrum(np.clip(mu, 0.0, None), float(epsilon), form)


def h0_limit_sample(spec: H0Spectrum, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws of ``sum_j mu_j N_j^2``; an empty spectrum is the point mass at 0."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    k = len(spec.weights)
    if k == 0:
        return np.zeros(draws)
    return (rng.standard_normal((draws, k)) ** 2) @ spec.weights


@dataclass(frozen=True)
class H0TestResult:
    observed: float
    divergence: float
    spectrum: H0Spectrum
    p_value: float
    mc_stderr: float
    critical_value: float
    level: float
    reject: bool
    draws: int

    def to_dict(self) -> dict:
        return {
            "observed": self.observed,
            "divergence": self.divergence,
            "spectrum": self.spectrum.weights.tolist(),
            "form": self.spectrum.form,
            "p_value": self.p_value,
            "mc_stderr": self.mc_stderr,
            "critical_value": self.critical_value,
            "level": self.level,
            "reject": self.reject,
            "draws": self.draws,
        }


def pooled_measure(P_n: DiscreteMeasure, n: int, Q_m: DiscreteMeasure, m: int) -> DiscreteMeasure:
    points = np.vstack([P_n.points, Q_m.points])
    weights = np.concatenate([P_n.weights * n, Q_m.weights * m]) / (n + m)
    return DiscreteMeasure.from_arrays(points, weights)


def h0_test(
    sample: DiscreteMeasure,
    n: int,
    epsilon: float,
    rng: np.random.Generator,
    reference: DiscreteMeasure | None = None,
    sample2: DiscreteMeasure | None = None,
    m: int | None = None,
    level: float = 0.95,
    draws: int = 100_000,
    form: str = SECOND_ORDER,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> H0TestResult:
    """Monte Carlo p-value for H0 against the chi-square-mixture limit.

    One-sample: ``reference`` is the hypothesized P and the statistic is
    ``n D(P_n, P)`` with the spectrum of P. Two-sample: ``sample2`` of size
    ``m`` replaces the reference, the statistic is ``nm/(n+m) D(P_n, Q_m)``
    and the spectrum is the plug-in one of the pooled sample.
    """
    _check_level(level)
    if (reference is None) == (sample2 is None):
        raise ValueError("pass exactly one of reference (one-sample) or sample2 (two-sample)")
    if sample2 is not None:
        if m is None:
            raise ValueError("two-sample test needs m")
        div = sinkhorn_divergence(sample, sample2, epsilon, tol, max_iter).value
        scale = n * m / (n + m)
        base = pooled_measure(sample, n, sample2, m)
    else:
        div = sinkhorn_divergence(sample, reference, epsilon, tol, max_iter).value
        scale = float(n)
        base = reference
    observed = scale * div
    spec = h0_limit_spectrum(base, epsilon, form, tol, max_iter)
    limit = h0_limit_sample(spec, draws, rng)
    if len(spec.weights) == 0:
        p_value = 1.0 if observed <= 1e-9 else 0.0
    else:
        p_value = float(np.mean(limit >= observed))
    stderr = math.sqrt(p_value * (1 - p_value) / draws)
    critical = float(np.quantile(limit, level))
    return H0TestResult(
        observed=float(observed), divergence=float(div), spectrum=spec,
        p_value=p_value, mc_stderr=stderr, critical_value=critical,
        level=level, reject=bool(p_value < 1 - level), draws=draws,
    )


# -- potentials ---------------------------------------------------------------


@dataclass(frozen=True)
class PotentialCovariance:
    """Covariance of the Gaussian limit of ``(f, g)`` at the atoms.

    ``base_P`` (m x m) and ``base_Q`` (n x n) are the covariances of the
    empirical processes ``(P_n - P) xi(., y)`` and ``(Q_m - Q) xi(x, .)``.
    """

    cov_f: np.ndarray
    cov_g: np.ndarray
    cross: np.ndarray
    base_P: np.ndarray = field(repr=False)
    base_Q: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"cov_f": self.cov_f.tolist(), "cov_g": self.cov_g.tolist(),
                "cross": self.cross.tolist()}


def potential_covariance(
    sol: SinkhornSolution, ops: KernelOperators, lam: float | None = None
) -> PotentialCovariance:
    """Limit covariance of ``sqrt(rate) (f_hat - f, g_hat - g)``.

    With ``R_x``, ``R_y`` the two resolvents, the linearization is
    ``df = eps (R_x A_Q G_P - R_x G_Q)``, ``dg = eps (A_P R_x G_Q - R_y G_P)``
    where ``G_P``, ``G_Q`` are the empirical processes of the kernel. The
    target potential is kept in the gauge ``E_Q g = 0`` of the population Q.
    """
    _check_lambda(lam)
    xi, p, q = sol.xi, ops.p, ops.q
    base_P = xi.T @ (p[:, None] * xi) - 1.0
    base_Q = xi @ (q[:, None] * xi.T) - 1.0
    Rx = ops.x_side.matrix()
    Ry = ops.y_side.matrix()
    eps2 = sol.epsilon**2

    fP = Rx @ ops.KQ
    gP = -Ry
    cov_f = fP @ base_P @ fP.T
    cov_g = gP @ base_P @ gP.T
    cross = fP @ base_P @ gP.T
    if lam is not None:
        fQ = -Rx
        gQ = ops.KP @ Rx
        cov_f = lam * cov_f + (1 - lam) * (fQ @ base_Q @ fQ.T)
        cov_g = lam * cov_g + (1 - lam) * (gQ @ base_Q @ gQ.T)
        cross = lam * cross + (1 - lam) * (fQ @ base_Q @ gQ.T)
    sym = lambda a: 0.5 * (a + a.T)
    return PotentialCovariance(
        cov_f=eps2 * sym(cov_f), cov_g=eps2 * sym(cov_g), cross=eps2 * cross,
        base_P=base_P, base_Q=base_Q,
    )
