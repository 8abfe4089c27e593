import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilevelnas.diffcore import ParamLayout, central_difference
from bilevelnas.estimators import (
    Amended,
    BruteForce,
    ExactImplicit,
    FirstOrder,
    SecondOrderDarts,
    amended_g2,
    epsilon_scale,
    estimate_arch_gradient,
    estimate_parts,
    g1,
    parse_estimator,
    second_order_darts_g2,
)
from bilevelnas.oracle import random_quadratic_instance, solve_inner
from bilevelnas.problem import (
    TOY_TRAIN_BATCH as TB,
    TOY_VAL_BATCH as VB,
    BilevelState,
    DegenerateDirection,
    tape_loss,
    toy_state,
)
from bilevelnas.search import supernet_loss
from bilevelnas.supernet import SuperNetConfig, init_arch, init_omega

_W = ParamLayout([("w", (1, 2))])
_A = ParamLayout([("a", (1, 2))])


def _separable_state():
    # train loss = |w|^2 + |a|^2 has zero mixed partial
    def train(t, w, a, _):
        return t.add(t.sum(t.mul(w["w"], w["w"])), t.sum(t.mul(a["a"], a["a"])))

    def val(t, w, a, _):
        return t.add(t.sum(t.mul(w["w"], w["w"])), t.sum(a["a"]))

    return BilevelState(np.array([0.3, -0.7]), np.array([1.0, 2.0]), tape_loss(train, _W, _A), tape_loss(val, _W, _A))


def _quadratic_state(seed, n=6, m=3):
    inst = random_quadratic_instance(seed, n, m)
    problem = inst.problem()
    alpha = np.random.default_rng(seed + 100).normal(size=m)
    w = solve_inner(problem, alpha)
    return inst, BilevelState(w, alpha, problem.train_loss, problem.val_loss)


def test_g1_toy():
    assert g1(toy_state(1.5), VB)[0] == pytest.approx(-3.0, abs=1e-12)


def test_g1_zero_without_direct_dependence():
    def val(t, w, a, _):
        return t.sum(t.mul(w["w"], w["w"]))

    s = BilevelState(np.ones(2), np.ones(2), tape_loss(val, _W, _A), tape_loss(val, _W, _A))
    assert np.array_equal(g1(s, None), np.zeros(2))


def test_g1_supernet_matches_central_differences():
    cfg = SuperNetConfig(num_cells=1, feature_dim=2)
    rng = np.random.default_rng(0)
    template = init_arch(cfg, rng, scale=0.5)
    loss = supernet_loss(cfg, template)
    batch = (rng.normal(size=(8, 2)), np.arange(8) % 2)
    s = BilevelState(init_omega(cfg, rng), template.to_vector(cfg), loss, loss)
    fd = central_difference(lambda a: loss(s.omega, a, batch, frozenset()).value, s.alpha, 1e-5)
    err = np.abs(g1(s, batch) - fd) / np.maximum(1, np.abs(fd))
    assert err.max() < 1e-5


@pytest.mark.parametrize("norm, eps", [(0.01, 1.0), (2.0, 0.005)])
def test_epsilon_scale(norm, eps):
    assert epsilon_scale(np.array([0.0, norm])) == pytest.approx(eps, rel=1e-15)


def test_epsilon_scale_zero_gradient():
    with pytest.raises(DegenerateDirection):
        epsilon_scale(np.zeros(3))


def test_amended_toy_value():
    assert amended_g2(toy_state(1.0), 0.1, TB, VB)[0] == pytest.approx(1.6, abs=1e-9)


@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3), st.floats(0.01, 2.0))
def test_amended_toy_formula(alpha, eta):
    assert amended_g2(toy_state(alpha), eta, TB, VB)[0] == pytest.approx(16 * eta * alpha, rel=1e-9, abs=1e-12)


def test_second_order_toy_value():
    assert second_order_darts_g2(toy_state(1.0), 1.0, TB, VB)[0] == pytest.approx(8.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_amended_matches_dense_algebra_on_quadratics(seed):
    inst, s = _quadratic_state(seed)
    b = inst.analytic_bundle(s.alpha)
    dense = -0.3 * b.J @ (b.H @ b.v)
    fd = amended_g2(s, 0.3, None, None)
    assert np.linalg.norm(fd - dense) / np.linalg.norm(dense) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_second_order_matches_dense_algebra_on_quadratics(seed):
    inst, s = _quadratic_state(seed)
    b = inst.analytic_bundle(s.alpha)
    dense = -0.2 * b.J @ b.v
    fd = second_order_darts_g2(s, 0.2, None, None)
    assert np.linalg.norm(fd - dense) / np.linalg.norm(dense) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_eta_and_xi_linearity(seed):
    _, s = _quadratic_state(seed)
    a1, a2 = amended_g2(s, 0.1, None, None), amended_g2(s, 0.2, None, None)
    assert np.linalg.norm(a2 - 2 * a1) <= 1e-9 * np.linalg.norm(a2)
    d1, d2 = second_order_darts_g2(s, 0.1, None, None), second_order_darts_g2(s, 0.2, None, None)
    assert np.linalg.norm(d2 - 2 * d1) <= 1e-9 * np.linalg.norm(d2)


def test_separable_losses_give_zero_implicit_terms():
    s = _separable_state()
    assert np.abs(amended_g2(s, 0.1, None, None)).max() < 1e-7
    assert np.abs(second_order_darts_g2(s, 1.0, None, None)).max() < 1e-7


def test_zero_validation_direction_falls_back_to_zero(caplog):
    # d/dw (2w - a)^2 vanishes at w = a / 2
    s = toy_state(1.0, omega=0.5)
    assert amended_g2(s, 0.1, TB, VB).tolist() == [0.0]
    assert second_order_darts_g2(s, 1.0, TB, VB).tolist() == [0.0]
    assert "zero validation gradient" in caplog.text


def test_dispatcher_toy_values():
    s = toy_state(1.0)
    assert estimate_arch_gradient(FirstOrder(), s, TB, VB)[0] == pytest.approx(-2.0, abs=1e-12)
    assert estimate_arch_gradient(Amended(0.1), s, TB, VB)[0] == pytest.approx(-0.4, abs=1e-9)
    assert estimate_arch_gradient(SecondOrderDarts(1.0), s, TB, VB)[0] == pytest.approx(6.0, abs=1e-9)
    assert estimate_arch_gradient(ExactImplicit(), s, TB, VB)[0] == pytest.approx(2.0, abs=1e-6)
    assert estimate_arch_gradient(BruteForce(), s, TB, VB)[0] == pytest.approx(2.0, abs=1e-6)


def test_eta_zero_is_first_order_bit_for_bit():
    for alpha in (-1.3, 0.2, 4.0):
        s = toy_state(alpha)
        a = estimate_arch_gradient(Amended(0.0), s, TB, VB)
        b = estimate_arch_gradient(FirstOrder(), s, TB, VB)
        assert a.tobytes() == b.tobytes()


def test_unresolved_xi_is_rejected():
    with pytest.raises(ValueError):
        estimate_parts(SecondOrderDarts(), toy_state(1.0), TB, VB)


@pytest.mark.parametrize("kind", [FirstOrder(), Amended(0.1), SecondOrderDarts(0.5), ExactImplicit(), BruteForce()])
def test_output_length_and_determinism(kind):
    _, s = _quadratic_state(0, 5, 2)
    a = estimate_arch_gradient(kind, s, None, None)
    b = estimate_arch_gradient(kind, s, None, None)
    assert a.shape == (2,)
    assert a.tobytes() == b.tobytes()


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
def test_toy_sign_property(alpha):
    s = toy_state(alpha)
    true_sign = np.sign(2 * alpha)
    assert np.sign(estimate_arch_gradient(FirstOrder(), s, TB, VB)[0]) == -true_sign
    # total amended estimate is (16 eta - 2) alpha: correct sign exactly when eta > 1/8
    assert np.sign(estimate_arch_gradient(Amended(0.5), s, TB, VB)[0]) == true_sign
    assert np.sign(estimate_arch_gradient(Amended(0.2), s, TB, VB)[0]) == true_sign
    assert np.sign(estimate_arch_gradient(Amended(0.1), s, TB, VB)[0]) == -true_sign


@pytest.mark.parametrize("make", [lambda: Amended(-0.1), lambda: SecondOrderDarts(0.0), lambda: BruteForce(0.0),
                                  lambda: ExactImplicit(-1.0)])
def test_invalid_parameters(make):
    with pytest.raises(ValueError):
        make()


def test_parse_estimator():
    assert parse_estimator("amended", eta=0.3) == Amended(0.3)
    assert parse_estimator("First-Order") == FirstOrder()
    assert parse_estimator("second-order", xi=0.5) == SecondOrderDarts(0.5)
    assert parse_estimator("brute-force") == BruteForce()
    with pytest.raises(ValueError):
        parse_estimator("newton")
