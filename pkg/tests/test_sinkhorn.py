import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracle
from conftest import random_measure
from sinkhorn_clt import DimensionMismatch, DiscreteMeasure, NoConvergence, sinkhorn_divergence, solve
from sinkhorn_clt.sinkhorn import (
    cost_matrix,
    extend_f,
    extend_g,
    fixed_point_residual,
    marginal_residual,
    primal_value,
    sinkhorn_cost,
    xi_to_csv,
)


def test_single_atoms():
    P = DiscreteMeasure.dirac([0.0, 0.0])
    Q = DiscreteMeasure.dirac([2.0, 0.0])
    sol = solve(P, Q, 1.0)
    assert sol.cost == pytest.approx(2.0, abs=1e-14)
    assert sol.g[0] == pytest.approx(0.0, abs=1e-14)


def test_gauge_and_marginals(planar_pair):
    P, Q = planar_pair
    sol = solve(P, Q, 0.5)
    assert abs(Q.weights @ sol.g) < 1e-13
    assert marginal_residual(sol.xi, P.weights, Q.weights) <= 1e-10
    assert fixed_point_residual(sol, P, Q) <= 1e-9
    plan = sol.plan(P, Q)
    np.testing.assert_allclose(plan.sum(axis=1), P.weights, atol=1e-10)


def test_duality_gap(planar_pair):
    P, Q = planar_pair
    for eps in (0.25, 1.0, 4.0):
        sol = solve(P, Q, eps)
        assert abs(primal_value(sol, P, Q) - sol.cost) <= 1e-9


def test_matches_scaling_oracle(rng):
    for _ in range(10):
        P = random_measure(rng, 5, 2)
        Q = random_measure(rng, 4, 2)
        sol = solve(P, Q, 0.5, tol=1e-12)
        f, g, _ = _oracle.scaling_solve(P.points, P.weights, Q.points, Q.weights, 0.5)
        np.testing.assert_allclose(sol.f, f, atol=1e-10)
        np.testing.assert_allclose(sol.g, g, atol=1e-10)


def test_no_convergence_reports_residual(planar_pair):
    P, Q = planar_pair
    with pytest.raises(NoConvergence) as info:
        solve(P, Q, 0.1, max_iter=1)
    assert info.value.residual > 1e-10
    assert info.value.iterations == 1


def test_bad_arguments(planar_pair):
    P, Q = planar_pair
    with pytest.raises(ValueError):
        solve(P, Q, 0.0)
    with pytest.raises(ValueError):
        solve(P, Q, 1.0, max_iter=0)
    with pytest.raises(DimensionMismatch):
        solve(P, DiscreteMeasure.dirac([0.0]), 1.0)


def test_small_epsilon_stable():
    P = DiscreteMeasure.from_arrays([[0.0], [1.0], [3.0]], [0.2, 0.5, 0.3])
    Q = DiscreteMeasure.from_arrays([[0.5], [2.5]], [0.6, 0.4])
    sol = solve(P, Q, 0.01)
    assert np.all(np.isfinite(sol.f))
    assert sinkhorn_cost(sol, P, Q) > 0


def test_extensions_agree_on_support(planar_pair):
    P, Q = planar_pair
    sol = solve(P, Q, 1.0, tol=1e-12)
    np.testing.assert_allclose(extend_f(sol, Q, P.points), sol.f, atol=1e-10)
    np.testing.assert_allclose(extend_g(sol, P, Q.points), sol.g, atol=1e-10)


def test_divergence_properties(planar_pair):
    P, Q = planar_pair
    assert abs(sinkhorn_divergence(P, P, 1.0).value) < 1e-12
    res = sinkhorn_divergence(P, Q, 1.0)
    assert res.value > 0
    assert res.value == pytest.approx(sinkhorn_divergence(Q, P, 1.0).value, abs=1e-10)


def test_xi_csv(two_atom):
    sol = solve(two_atom, two_atom, 1.0)
    rows = xi_to_csv(sol).strip().split("\n")
    assert len(rows) == 2
    assert float(rows[0].split(",")[0]) == sol.xi[0, 0]


def test_cost_matrix():
    c = cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
    assert c[0, 0] == 12.5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([0.25, 1.0, 4.0]), st.integers(0, 10**6))
def test_solver_invariants(n, m, eps, seed):
    rng = np.random.default_rng(seed)
    P = random_measure(rng, n, 2)
    Q = random_measure(rng, m, 2)
    sol = solve(P, Q, eps)
    assert sol.residual <= 1e-10
    assert abs(primal_value(sol, P, Q) - sol.cost) <= 1e-9
    assert fixed_point_residual(sol, P, Q) <= 1e-9
    # permuting atoms permutes the potentials
    order = rng.permutation(n)
    sol_perm = solve(P.permuted(order), Q, eps)
    np.testing.assert_allclose(sol_perm.f, sol.f[order], atol=1e-9)
    assert math.isclose(sol_perm.cost, sol.cost, abs_tol=1e-9)
