import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilevelnas.diffcore import Tape, backward
from bilevelnas.supernet import (
    ArchParams,
    Genotype,
    OperatorKind,
    SuperNetConfig,
    degeneration_metrics,
    discretize,
    forward,
    init_arch,
    init_omega,
    loss_and_grads,
    mixed_edge_output,
    node_output_edge_search,
    omega_layout,
)

NONE, SKIP, LIN, NONLIN = OperatorKind


def _edge(x, logits, ops, params=None):
    t = Tape()
    p = {k: t.constant(v) for k, v in (params or {}).items()}
    return mixed_edge_output(t, t.constant(x), t.constant(np.asarray(logits, float)), p, ops).data


def test_equal_logits_skip_and_none_halves_input():
    x = np.array([[1.0, -2.0], [0.5, 4.0]])
    np.testing.assert_array_equal(_edge(x, [0.0, 0.0], (NONE, SKIP)), x / 2)


def test_saturated_skip_returns_input():
    x = np.array([[1.0, -2.0, 3.0]])
    out = _edge(x, [-100.0, 100.0, -100.0, -100.0], tuple(OperatorKind),
                {"edge.linear.W": np.eye(3), "edge.linear.b": np.zeros(3),
                 "edge.nonlinear.W": np.eye(3), "edge.nonlinear.b": np.zeros(3)})
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-10)


def test_skip_plus_doubling_linear():
    out = _edge(np.array([[1.0, 0.0]]), [0.0, 0.0], (SKIP, LIN),
                {"edge.linear.W": 2 * np.eye(2), "edge.linear.b": np.zeros(2)})
    np.testing.assert_allclose(out, [[1.5, 0.0]], rtol=0, atol=1e-15)


def _node(inputs, beta, combos):
    t = Tape()
    ins = {k: t.constant(v) for k, v in inputs.items()}
    return node_output_edge_search(t, ins, t.constant(np.asarray(beta, float)), combos).data


def test_single_combination_is_plain_sum():
    a, b = np.array([[1.0, 2.0]]), np.array([[0.25, -1.0]])
    assert np.array_equal(_node({0: a, 1: b}, [0.3], [(0, 1)]), a + b)


def test_two_combinations_equal_beta():
    a, b, c = (np.array([[v, -v]]) for v in (1.0, 2.0, 5.0))
    out = _node({0: a, 1: b, 2: c}, [0.0, 0.0], [(0, 1), (1, 2)])
    np.testing.assert_allclose(out, (a + 2 * b + c) / 2, rtol=0, atol=1e-15)


def test_saturated_beta_selects_combination():
    a, b, c = (np.array([[v]]) for v in (1.0, 2.0, 5.0))
    out = _node({0: a, 1: b, 2: c}, [200.0, 0.0], [(0, 1), (1, 2)])
    np.testing.assert_allclose(out, a + b, rtol=0, atol=1e-10)


def test_empty_combinations_rejected():
    t = Tape()
    with pytest.raises(ValueError):
        node_output_edge_search(t, {}, t.constant(np.zeros(0)), [])


def test_skip_only_network_matches_closed_form_cross_entropy():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=1, feature_dim=3, operators=(SKIP,))
    rng = np.random.default_rng(0)
    omega = rng.normal(size=omega_layout(cfg).size)
    X = rng.normal(size=(8, 2))
    y = np.arange(8) % 2
    loss, _ = forward(cfg, init_arch(cfg), omega, X, y)
    p = omega_layout(cfg).unflatten(omega)
    # node 2 = s0 + s1 with both inputs equal to the stem output; cell mean over one node
    feats = 2.0 * (X @ p["stem.W"] + p["stem.b"])
    logits = feats @ p["head.W"] + p["head.b"]
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))).ravel()
    expected = np.mean(lse - logits[np.arange(8), y])
    assert abs(float(loss.data) - expected) < 1e-12


def test_random_init_loss_near_chance():
    cfg = SuperNetConfig()
    rng = np.random.default_rng(1)
    X = rng.normal(size=(64, 2))
    y = np.arange(64) % 2
    loss, tape = forward(cfg, init_arch(cfg, rng), init_omega(cfg, rng), X, y)
    assert abs(float(loss.data) - math.log(2)) < 0.5
    assert {"omega", "alpha"} <= set(tape.groups)


def _arch_with(cfg, edge_logits):
    alpha = np.tile(np.asarray(edge_logits, float), (cfg.num_groups, len(cfg.edges), 1))
    return ArchParams(alpha)


def test_discretize_excludes_none():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=1, operators=(NONE, SKIP, LIN))
    g = discretize(_arch_with(cfg, [5.0, 1.0, 0.0]), cfg)
    assert g.all_ops() == [SKIP, SKIP]


def test_discretize_tie_goes_to_lower_index():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=1, operators=(NONE, SKIP, LIN))
    g = discretize(_arch_with(cfg, [0.0, 1.0, 1.0]), cfg)
    assert set(g.all_ops()) == {SKIP}


def test_equal_logits_genotype_is_seed_independent():
    cfg = SuperNetConfig(nodes_per_cell=3)
    arch = ArchParams(np.zeros((1, len(cfg.edges), 4)))
    g = discretize(arch, cfg)
    # every edge ties: skip wins the op tie, lowest edge indices win the pruning tie
    assert g.to_dict() == {"cells": [{"nodes": [
        {"inputs": [[0, "skip_connect"], [1, "skip_connect"]], "node": 2},
        {"inputs": [[0, "skip_connect"], [1, "skip_connect"]], "node": 3},
        {"inputs": [[0, "skip_connect"], [1, "skip_connect"]], "node": 4},
    ]}]}
    assert discretize(arch.copy(), cfg) == g


def test_pruning_keeps_strongest_edges():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=2)
    alpha = np.zeros((1, len(cfg.edges), 4))
    # node 3 has incoming edges (0,3), (1,3), (2,3); make (1,3) weak
    k = cfg.edges.index((1, 3))
    alpha[0, k] = [5.0, 0.0, 0.0, 0.0]
    g = discretize(ArchParams(alpha), cfg)
    assert [i for i, _ in dict(g.cells[0])[3]] == [0, 2]


def test_unpruned_genotype_keeps_all_edges():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=2, prune_edges=False)
    g = discretize(ArchParams(np.zeros((1, len(cfg.edges), 4))), cfg)
    assert len(g.edges(0)) == len(cfg.edges)


def test_metrics_uniform_logits():
    cfg = SuperNetConfig()
    m = degeneration_metrics(ArchParams(np.zeros((1, len(cfg.edges), 4))), cfg)
    assert m["mean_none_weight"] == pytest.approx(0.25, abs=1e-15)
    assert m["skip_ratio"] == 1.0


def test_metrics_none_weight_095():
    cfg = SuperNetConfig()
    m = degeneration_metrics(_arch_with(cfg, [math.log(57.0), 0.0, 0.0, 0.0]), cfg)
    assert m["mean_none_weight"] == pytest.approx(0.95, abs=1e-12)


def test_metrics_no_skip():
    cfg = SuperNetConfig()
    m = degeneration_metrics(_arch_with(cfg, [0.0, 0.0, 0.0, 3.0]), cfg)
    assert m["skip_ratio"] == 0.0


dyadic = st.integers(-64, 64).map(lambda k: k / 8.0)


@given(st.lists(dyadic, min_size=4, max_size=4), dyadic)
def test_shift_invariance_of_edges_and_discretize(logits, shift):
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=1, feature_dim=2)
    rng = np.random.default_rng(0)
    params = {k: v for k, v in omega_layout(cfg).unflatten(rng.normal(size=omega_layout(cfg).size)).items()
              if k.startswith("cell0.e0_2")}
    params = {k.replace("cell0.e0_2", "edge"): v for k, v in params.items()}
    x = rng.normal(size=(3, 2))
    a = _edge(x, logits, cfg.operators, params)
    b = _edge(x, np.asarray(logits) + shift, cfg.operators, params)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert discretize(_arch_with(cfg, logits), cfg) == discretize(_arch_with(cfg, np.asarray(logits) + shift), cfg)


@given(st.integers(0, 2**32 - 1))
def test_discretize_never_none_and_weights_normalized(seed):
    rng = np.random.default_rng(seed)
    cfg = SuperNetConfig(nodes_per_cell=3, share_cell_params=False)
    arch = ArchParams(rng.normal(scale=3.0, size=(cfg.num_groups, len(cfg.edges), 4)))
    g = discretize(arch, cfg)
    assert NONE not in g.all_ops()
    for cell in g.cells:
        assert all(len(inputs) == cfg.inputs_per_node for _, inputs in cell)
    np.testing.assert_allclose(arch.edge_weights(cfg).sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_shared_alpha_gradient_is_sum_of_per_cell_gradients():
    shared = SuperNetConfig(num_cells=2, feature_dim=3)
    split = SuperNetConfig(num_cells=2, feature_dim=3, share_cell_params=False)
    rng = np.random.default_rng(4)
    omega = init_omega(shared, rng)
    assert omega_layout(shared).names() == omega_layout(split).names()
    base = rng.normal(size=(1, len(shared.edges), 4))
    X, y = rng.normal(size=(10, 2)), np.arange(10) % 2
    _, _, g_shared = loss_and_grads(shared, ArchParams(base), omega, X, y)
    _, _, g_split = loss_and_grads(split, ArchParams(np.concatenate([base, base])), omega, X, y)
    half = g_shared.size
    np.testing.assert_allclose(g_shared, g_split[:half] + g_split[half:], rtol=0, atol=1e-10)


def test_edge_search_genotype_uses_argmax_combination():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=1, input_nodes=3, search_edges=True)
    assert cfg.combinations(3) == [(0, 1), (0, 2), (1, 2)]
    arch = init_arch(cfg)
    arch.beta[3][0] = [0.0, 1.0, 0.0]
    g = discretize(arch, cfg)
    assert [i for i, _ in dict(g.cells[0])[3]] == [0, 2]
    arch.beta[3][0] = [0.0, 0.0, 0.0]  # tie: lexicographically first combination
    assert [i for i, _ in dict(discretize(arch, cfg).cells[0])[3]] == [0, 1]


def test_edge_search_gradients_reach_beta():
    cfg = SuperNetConfig(num_cells=1, nodes_per_cell=2, feature_dim=2, search_edges=True)
    rng = np.random.default_rng(0)
    loss, tape = forward(cfg, init_arch(cfg, rng), init_omega(cfg, rng), rng.normal(size=(6, 2)), np.arange(6) % 2)
    g = backward(tape, loss, ["alpha"])["alpha"]
    assert any(k.startswith("beta") and np.any(v != 0) for k, v in g.items())


def test_genotype_json_roundtrip():
    g = Genotype((((2, ((0, SKIP), (1, NONLIN))),),))
    assert Genotype.from_dict(g.to_dict()) == g
    assert g.to_json() == '{"cells":[{"nodes":[{"inputs":[[0,"skip_connect"],[1,"nonlinear"]],"node":2}]}]}\n'


def test_operator_kind_properties():
    assert not NONE.parametric and not SKIP.parametric
    assert LIN.parametric and NONLIN.parametric
    assert OperatorKind.parse("skip") is SKIP and OperatorKind.parse("nonlinear") is NONLIN


@pytest.mark.parametrize("bad", [dict(edges=((2, 2),)), dict(edges=((3, 2),)), dict(operators=()),
                                 dict(operators=(NONE,)), dict(feature_dim=0)])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        SuperNetConfig(**bad)


def test_parameter_free_ops_have_no_weights():
    cfg = SuperNetConfig(operators=(NONE, SKIP))
    assert all(not n.startswith("cell") for n in omega_layout(cfg).names())


def test_fingerprint_tracks_values():
    cfg = SuperNetConfig()
    a = init_arch(cfg, np.random.default_rng(0))
    b = a.copy()
    assert a.fingerprint() == b.fingerprint()
    b.alpha[0, 0, 0] += 1e-12
    assert a.fingerprint() != b.fingerprint()
