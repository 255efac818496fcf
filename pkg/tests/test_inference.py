import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracle
from conftest import random_measure
from sinkhorn_clt import (
    DimensionMismatch,
    DiscreteMeasure,
    FunctionalSpec,
    build_operators,
    divergence_h1_variance,
    eta_marginals,
    functional_ci,
    functional_variance,
    h0_limit_sample,
    h0_limit_spectrum,
    h0_test,
    potential_covariance,
    solve,
)
from sinkhorn_clt.inference import (
    cost_ci,
    divergence_ci,
    make_report,
    normal_quantile,
    pooled_measure,
    rcol_ci,
)


def _setup(P, Q, eps=1.0):
    sol = solve(P, Q, eps, tol=1e-12)
    return sol, build_operators(sol, P, Q)


@pytest.mark.parametrize("prob", [1e-10, 0.01, 0.025, 0.3, 0.5, 0.975, 0.999999])
def test_normal_quantile(prob):
    assert normal_quantile(prob) == pytest.approx(scipy.stats.norm.ppf(prob), abs=1e-12)


def test_report_width():
    r = make_report(1.0, 4.0, 100.0, 0.95, None)
    assert r.ci_high - r.ci_low == pytest.approx(2 * normal_quantile(0.975) * 0.2)
    assert r.to_dict()["lambda"] == "one-sample"
    with pytest.raises(ValueError):
        make_report(1.0, 1.0, 1.0, 1.0, None)


def test_eta_marginals_of_constant(planar_pair):
    P, Q = planar_pair
    sol, _ = _setup(P, Q)
    ex, ey = eta_marginals(FunctionalSpec.constant(3.0), sol, P, Q)
    np.testing.assert_allclose(ex, 3.0, atol=1e-10)
    np.testing.assert_allclose(ey, 3.0, atol=1e-10)


def test_variance_against_delta_method(planar_pair):
    P, Q = planar_pair
    sol, ops = _setup(P, Q, 0.5)
    eta = FunctionalSpec.threshold(0.5).evaluate(P, Q) + FunctionalSpec.half_squared_distance().evaluate(P, Q)

    def stat_p(w):
        return _oracle.plan_functional(P.points, w, Q.points, Q.weights, 0.5, eta)

    def stat_q(w):
        return _oracle.plan_functional(P.points, P.weights, Q.points, w, 0.5, eta)

    assert functional_variance(eta, sol, ops) == pytest.approx(
        _oracle.delta_variance(stat_p, P.weights), abs=1e-7)
    assert functional_variance(eta, sol, ops, 0.3) == pytest.approx(
        _oracle.delta_variance(stat_p, P.weights, stat_q, Q.weights, 0.3), abs=1e-7)


def test_potential_covariance_against_delta_method(planar_pair):
    P, Q = planar_pair
    sol, ops = _setup(P, Q, 0.5)
    cov = potential_covariance(sol, ops, 0.4)

    def g_p(w):
        return _oracle.scaling_solve(P.points, w, Q.points, Q.weights, 0.5)[1]

    def g_q(w):
        f, g, _ = _oracle.scaling_solve(P.points, P.weights, Q.points, w, 0.5)
        return g - Q.weights @ g

    ref = _oracle.delta_covariance(g_p, P.weights, g_q, Q.weights, 0.4)
    np.testing.assert_allclose(cov.cov_g, ref, atol=1e-7)
    # base covariances annihilate constants in the weighted sense
    np.testing.assert_allclose(cov.base_P @ Q.weights, 0, atol=1e-10)
    np.testing.assert_allclose(cov.base_Q @ P.weights, 0, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(cov.cov_f) > -1e-12)


def test_h1_against_delta_method(planar_pair):
    P, Q = planar_pair
    var, psi_pq, psi_qp = divergence_h1_variance(P, Q, 1.0, 0.5)
    ref = _oracle.delta_variance(
        lambda w: _oracle.divergence(P.points, w, Q.points, Q.weights, 1.0), P.weights,
        lambda w: _oracle.divergence(P.points, P.weights, Q.points, w, 1.0), Q.weights, 0.5)
    assert var == pytest.approx(ref, abs=1e-7)
    assert psi_pq.shape == (P.size,) and psi_qp.shape == (Q.size,)


def test_h1_degenerate(planar_pair):
    P, _ = planar_pair
    assert divergence_h1_variance(P, P, 1.0, 0.5)[0] <= 1e-10
    r = divergence_ci(P, P, 1.0, 0.95, 100)
    assert any("degenerate" in w for w in r.warnings)


def test_wrong_shape_eta(planar_pair):
    P, Q = planar_pair
    sol, ops = _setup(P, Q)
    with pytest.raises(DimensionMismatch):
        functional_variance(np.ones((2, 2)), sol, ops)
    with pytest.raises(DimensionMismatch):
        FunctionalSpec.matrix(np.ones((2, 2))).evaluate(P, Q)


def test_rcol_saturates(planar_pair):
    P, Q = planar_pair
    r = rcol_ci(P, Q, 1.0, 100.0, 0.95, 50)
    assert r.ci_low == pytest.approx(1.0, abs=1e-10)
    assert r.ci_high == pytest.approx(1.0, abs=1e-10)


def test_functional_ci_two_sample_default_lambda(planar_pair):
    P, Q = planar_pair
    r = functional_ci(FunctionalSpec.half_squared_distance(), P, Q, 1.0, 0.9, 100, 300)
    assert r.lam == pytest.approx(0.75)
    assert r.rate == pytest.approx(75.0)
    with pytest.raises(ValueError):
        functional_ci(FunctionalSpec.half_squared_distance(), P, Q, 1.0, 0.9, 100, lam=0.5)


def test_cost_ci(planar_pair):
    P, Q = planar_pair
    r = cost_ci(P, Q, 1.0, 0.95, 1000)
    assert r.ci_low < r.estimate < r.ci_high


def test_h0_spectrum_single_atom():
    spec = h0_limit_spectrum(DiscreteMeasure.dirac([1.0, 2.0]), 1.0)
    assert len(spec.weights) == 0
    assert np.all(h0_limit_sample(spec, 10, np.random.default_rng(0)) == 0)


@pytest.mark.parametrize("eps", [0.5, 2.0])
def test_h0_spectrum_matches_hessian(two_atom, eps):
    P = DiscreteMeasure.from_arrays([[0.0], [0.7], [1.5]], [0.2, 0.5, 0.3])
    ref = _oracle.h0_hessian_spectrum(P.points, P.weights, eps)
    np.testing.assert_allclose(h0_limit_spectrum(P, eps).weights, ref, atol=1e-6)


def test_h0_sample_moments(planar_pair):
    spec = h0_limit_spectrum(planar_pair[0], 1.0)
    draws = h0_limit_sample(spec, 200_000, np.random.default_rng(1))
    assert draws.mean() == pytest.approx(spec.mean, rel=0.02)
    assert draws.var() == pytest.approx(spec.variance, rel=0.05)


def test_h0_test_single_atom():
    P = DiscreteMeasure.dirac([0.0])
    res = h0_test(P, 10, 1.0, np.random.default_rng(0), reference=P, draws=100)
    assert res.p_value == 1.0 and not res.reject


def test_h0_test_detects_shift(planar_pair):
    P, Q = planar_pair
    res = h0_test(Q, 500, 1.0, np.random.default_rng(0), reference=P, draws=1000)
    assert res.p_value == 0.0 and res.reject


def test_h0_two_sample(planar_pair):
    P, _ = planar_pair
    res = h0_test(P, 100, 1.0, np.random.default_rng(0), sample2=P, m=100, draws=1000)
    assert res.p_value == 1.0
    pooled = pooled_measure(P, 100, P, 100)
    assert pooled.equals(P, tol=1e-15)
    with pytest.raises(ValueError):
        h0_test(P, 100, 1.0, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 5), st.floats(-5, 5), st.floats(0.1, 10),
       st.integers(0, 10**6))
def test_functional_variance_algebra(n, m, c, a, seed):
    rng = np.random.default_rng(seed)
    P = random_measure(rng, n, 2)
    Q = random_measure(rng, m, 2)
    sol, ops = _setup(P, Q)
    eta = rng.normal(size=(P.size, Q.size))
    base = functional_variance(eta, sol, ops, 0.5)
    assert functional_variance(np.full_like(eta, c), sol, ops, 0.5) <= 1e-12
    assert functional_variance(eta + c, sol, ops, 0.5) == pytest.approx(base, rel=1e-9, abs=1e-14)
    assert functional_variance(a * eta, sol, ops, 0.5) == pytest.approx(a * a * base, rel=1e-10)
    assert math.isfinite(base) and base >= 0


def test_eta_marginal_identity(planar_pair, rng):
    P, Q = planar_pair
    sol, _ = _setup(P, Q)
    eta = rng.normal(size=sol.shape)
    ex, ey = eta_marginals(eta, sol, P, Q)
    total = np.sum(sol.plan(P, Q) * eta)
    assert P.weights @ ex == pytest.approx(total, abs=1e-10)
    assert Q.weights @ ey == pytest.approx(total, abs=1e-10)
    with pytest.raises(DimensionMismatch):
        eta_marginals(np.ones((1, 1)), sol, P, Q)
