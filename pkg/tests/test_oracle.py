import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevelnas.diffcore import ParamLayout
from bilevelnas.oracle import (
    MAX_DIM_OMEGA,
    CurvatureBundle,
    DimensionCapExceeded,
    QuadraticInstance,
    brute_force_hypergradient,
    exact_g2,
    extract_curvature,
    inner_product_check,
    random_quadratic_instance,
    solve_inner,
    toy_problem,
)
from bilevelnas.problem import BilevelProblem, NonConvergence, SingularHessian, tape_loss


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("alpha", [0.7, 0.0, -1.25])
def test_toy_inner_solution(alpha):
    assert solve_inner(toy_problem(), np.array([alpha]))[0] == pytest.approx(alpha, abs=1e-12)


def test_toy_inner_solution_by_descent():
    p = toy_problem()
    p.inner_solution = None
    assert solve_inner(p, np.array([0.7]))[0] == pytest.approx(0.7, abs=1e-10)


@pytest.mark.parametrize("closed_form", [True, False])
def test_quadratic_inner_solution(closed_form):
    inst = random_quadratic_instance(3, 5, 2, eig_range=(1.0, 10.0))
    alpha = np.array([0.4, -1.1])
    w = solve_inner(inst.problem(closed_form), alpha, tol=1e-10)
    # residual P w - Q a bounded by tol, so the error is bounded by tol / lambda_min
    assert np.linalg.norm(w - np.linalg.solve(inst.P, inst.Q @ alpha)) <= 1e-10 / 1.0
    assert np.linalg.norm(inst.P @ w - inst.Q @ alpha) <= 1e-10


def test_non_convergence_reports_residual():
    inst = random_quadratic_instance(0, 6, 2, eig_range=(0.01, 100.0))
    with pytest.raises(NonConvergence) as err:
        solve_inner(inst.problem(closed_form=False), np.ones(2), tol=1e-14, max_iters=2)
    assert err.value.iterations == 2 and err.value.residual > 1e-14


def test_solve_inner_rejects_bad_tol():
    with pytest.raises(ValueError):
        solve_inner(toy_problem(), np.ones(1), tol=0.0)


def test_toy_curvature():
    b = extract_curvature(toy_problem(), np.array([1.5]), np.array([1.5]))
    np.testing.assert_allclose(b.H, [[2.0]], atol=1e-9)
    np.testing.assert_allclose(b.J, [[-2.0]], atol=1e-9)
    np.testing.assert_allclose(b.v, [6.0], atol=1e-12)


def test_separable_curvature_has_zero_mixed_block():
    W, A = ParamLayout([("w", (1, 3))]), ParamLayout([("a", (1, 2))])

    def train(t, w, a, _):
        return t.add(t.sum(t.mul(w["w"], w["w"])), t.sum(t.mul(a["a"], a["a"])))

    p = BilevelProblem(3, 2, tape_loss(train, W, A), tape_loss(train, W, A))
    b = extract_curvature(p, np.ones(3), np.ones(2))
    assert np.abs(b.J).max() < 1e-7


@pytest.mark.parametrize("seed", range(3))
def test_quadratic_curvature_recovers_construction(seed):
    inst = random_quadratic_instance(seed, 8, 3)
    alpha = np.ones(3)
    b = extract_curvature(inst.problem(), inst.omega_star(alpha), alpha)
    assert np.abs(b.H - inst.P).max() < 1e-7
    assert np.abs(b.J + inst.Q.T).max() < 1e-7
    assert b.asymmetry < 1e-5


def test_exact_g2_toy():
    b = extract_curvature(toy_problem(), np.array([1.0]), np.array([1.0]))
    assert exact_g2(b)[0] == pytest.approx(4.0, abs=1e-8)


@pytest.mark.parametrize("alpha", np.linspace(-2, 2, 20))
def test_exact_g2_toy_is_four_alpha(alpha):
    a = np.array([alpha])
    b = extract_curvature(toy_problem(), a, a)
    assert exact_g2(b)[0] == pytest.approx(4 * alpha, abs=1e-8)


def test_exact_g2_zero_v():
    b = CurvatureBundle(np.eye(3), np.ones((2, 3)), np.zeros(3))
    assert np.array_equal(exact_g2(b), np.zeros(2))


def test_singular_hessian():
    with pytest.raises(SingularHessian) as err:
        exact_g2(CurvatureBundle(np.diag([1.0, 0.0]), np.ones((1, 2)), np.ones(2)))
    assert err.value.min_eigenvalue == 0.0
    with pytest.raises(SingularHessian):
        inner_product_check(CurvatureBundle(np.diag([1.0, -1.0]), np.ones((1, 2)), np.ones(2)), 0.1)


def test_dimension_cap():
    with pytest.raises(DimensionCapExceeded):
        random_quadratic_instance(0, MAX_DIM_OMEGA + 1, 2)
    big = BilevelProblem(MAX_DIM_OMEGA + 1, 1, None, None)
    with pytest.raises(DimensionCapExceeded):
        extract_curvature(big, np.zeros(MAX_DIM_OMEGA + 1), np.zeros(1))


@pytest.mark.parametrize("alpha", [-1.0, 0.3, 2.0])
def test_brute_force_toy(alpha):
    assert brute_force_hypergradient(toy_problem(), np.array([alpha]))[0] == pytest.approx(2 * alpha, abs=1e-8)


def test_brute_force_constant_val_loss():
    W, A = ParamLayout([("w", (1, 1))]), ParamLayout([("a", (1, 1))])
    p = toy_problem()
    p.val_loss = tape_loss(lambda t, w, a, _: t.sum(t.constant(np.array([3.0]))), W, A)
    assert brute_force_hypergradient(p, np.array([0.5]))[0] == 0.0


def test_random_4x6_instance_exact_vs_brute():
    inst = random_quadratic_instance(11, 6, 4)
    p = inst.problem()
    alpha = np.random.default_rng(0).normal(size=4)
    w = solve_inner(p, alpha)
    b = extract_curvature(p, w, alpha)
    g1 = p.val(w, alpha, {"alpha"}).grad_alpha
    brute = brute_force_hypergradient(p, alpha)
    assert _rel(exact_g2(b), brute - g1) < 1e-4
    assert _rel(g1 + exact_g2(b), inst.analytic_hypergradient(alpha)) < 1e-6


def test_brute_force_without_closed_form():
    inst = random_quadratic_instance(5, 4, 2, eig_range=(1.0, 10.0))
    alpha = np.array([0.5, -0.25])
    brute = brute_force_hypergradient(inst.problem(closed_form=False), alpha)
    assert _rel(brute, inst.analytic_hypergradient(alpha)) < 1e-4


def test_toy_inner_product():
    b = extract_curvature(toy_problem(), np.array([1.0]), np.array([1.0]))
    r = inner_product_check(b, 0.1)
    assert r["g2"][0] == pytest.approx(4.0, abs=1e-8)
    assert r["g2prime"][0] == pytest.approx(1.6, abs=1e-8)
    # 4 alpha * 16 eta alpha = 6.4 alpha^2 at eta = 0.1
    assert r["ip"] == pytest.approx(6.4, abs=1e-7)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.sampled_from(["identity", "commuting"]), st.integers(1, 10), st.integers(1, 6),
       st.floats(1e-3, 10.0))
def test_inner_product_nonnegative_for_commuting_curvature(seed, kind, n, m, eta):
    inst = random_quadratic_instance(seed, n, m, kind)
    alpha = np.random.default_rng(seed).normal(size=m)
    r = inner_product_check(inst.analytic_bundle(alpha), eta)
    assert r["ip"] >= -1e-12


def test_commuting_construction_commutes():
    inst = random_quadratic_instance(2, 7, 3, "commuting")
    JtJ = inst.Q @ inst.Q.T
    np.testing.assert_allclose(inst.P @ JtJ, JtJ @ inst.P, atol=1e-10)


def test_inner_product_needs_positive_eta():
    with pytest.raises(ValueError):
        inner_product_check(CurvatureBundle(np.eye(1), np.ones((1, 1)), np.ones(1)), 0.0)


def test_instance_json_roundtrip():
    inst = random_quadratic_instance(9, 3, 2, "commuting")
    d = json.loads(inst.to_json())
    assert d["dim_omega"] == 3 and d["dim_alpha"] == 2 and d["kind"] == "commuting"
    back = QuadraticInstance.from_dict(d)
    for k in "PQABc":
        assert np.array_equal(getattr(back, k), getattr(inst, k))
    assert random_quadratic_instance(9, 3, 2, "commuting").to_json() == inst.to_json()


def test_conditioning_of_generated_instances():
    for seed in range(20):
        eig = np.linalg.eigvalsh(random_quadratic_instance(seed, 16, 8).P)
        assert eig.max() / eig.min() < 1e4
