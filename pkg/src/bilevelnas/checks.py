"""Gradient-check suite over every tape op and the super-network loss.

Each case builds a scalar loss from one op (projected onto random constants
so every output coordinate matters) and compares reverse-mode gradients with
central differences. Cases that are polynomial of degree <= 2 in their inputs
get the tight tolerance, since central differences are exact there up to
rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .diffcore import OP_KINDS, ParamLayout, Tape, backward, gradcheck
from .supernet import SuperNetConfig, forward, init_arch, init_omega, loss_and_grads, omega_layout

__all__ = [
    "QUADRATIC_TOL",
    "SMOOTH_TOL",
    "GradcheckCase",
    "CaseResult",
    "op_cases",
    "supernet_cases",
    "extended_supernet_cases",
    "default_cases",
    "run_suite",
]

QUADRATIC_TOL = 1e-8
SMOOTH_TOL = 1e-5

Fun = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class GradcheckCase:
    name: str
    quadratic: bool
    # make(rng) -> (fun, x, value_fun or None)
    make: Callable[[np.random.Generator], tuple]

    @property
    def tolerance(self) -> float:
        return QUADRATIC_TOL if self.quadratic else SMOOTH_TOL


@dataclass(frozen=True)
class CaseResult:
    name: str
    seeds: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _tape_fun(shapes, build) -> tuple[Fun, ParamLayout]:
    layout = ParamLayout(shapes)

    def fun(flat):
        tape = Tape()
        leaves = tape.leaves_from_flat(flat, layout, "x")
        out = build(tape, leaves)
        grads = backward(tape, out, ["x"])["x"]
        return float(out.data), layout.flatten(grads)

    return fun, layout


def _project(tape: Tape, t, c: np.ndarray):
    return tape.sum(tape.mul(t, tape.constant(c)))


def _case(name, quadratic, shapes, build, sample=None) -> GradcheckCase:
    """``build(tape, leaves, consts)``; ``sample(rng, size)`` draws the check point."""

    def make(rng):
        consts = {k: rng.normal(size=s) for k, s in shapes}
        fun, layout = _tape_fun(shapes, lambda tape, leaves: build(tape, leaves, consts))
        x = sample(rng, layout.size) if sample else rng.normal(size=layout.size)
        return fun, x, None

    return GradcheckCase(name, quadratic, make)


def _away_from_zero(rng, n):
    # relu has a kink at 0; keep every coordinate well outside the FD stencil
    return rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.05, 2.0, size=n)


def _positive(rng, n):
    return rng.uniform(0.5, 2.0, size=n)


def op_cases() -> list[GradcheckCase]:
    m = (3, 4)
    p = lambda tape, t, c: _project(tape, t, c)  # noqa: E731
    cases = [
        _case("add", True, [("a", m), ("b", m)], lambda t, L, c: p(t, t.add(L["a"], L["b"]), c["a"])),
        _case("subtract", True, [("a", m), ("b", m)], lambda t, L, c: p(t, t.subtract(L["a"], L["b"]), c["a"])),
        _case("mul", True, [("a", m), ("b", m)], lambda t, L, c: p(t, t.mul(L["a"], L["b"]), c["a"])),
        _case("matmul", True, [("a", (3, 4)), ("b", (4, 2))],
              lambda t, L, c: p(t, t.matmul(L["a"], L["b"]), c["a"][:, :2])),
        _case("scale", True, [("a", m), ("s", (1,))], lambda t, L, c: p(t, t.scale(L["a"], L["s"]), c["a"])),
        _case("tanh", False, [("a", m)], lambda t, L, c: p(t, t.tanh(L["a"]), c["a"])),
        _case("relu", False, [("a", m)], lambda t, L, c: p(t, t.relu(L["a"]), c["a"]), _away_from_zero),
        _case("softmax", False, [("a", m)], lambda t, L, c: p(t, t.softmax(L["a"]), c["a"])),
        _case("log", False, [("a", m)], lambda t, L, c: p(t, t.log(L["a"]), c["a"]), _positive),
        _case("sum", True, [("a", m)], lambda t, L, c: t.mul(t.sum(L["a"]), t.sum(L["a"]))),
        _case("mean", True, [("a", m)], lambda t, L, c: t.mul(t.mean(L["a"]), t.mean(L["a"]))),
        _case("squared_error", True, [("a", m), ("b", m)], lambda t, L, c: t.squared_error(L["a"], L["b"])),
        _case("softmax_cross_entropy", False, [("a", m)],
              lambda t, L, c: t.softmax_cross_entropy(L["a"], np.array([0, 3, 1]))),
        _case("concatenate", True, [("a", (3, 2)), ("b", (3, 2))],
              lambda t, L, c: p(t, t.concatenate([L["a"], L["b"]]), np.tile(c["a"], 2))),
        _case("affine", True, [("x", (3, 2)), ("w", (2, 4)), ("b", (4,))],
              lambda t, L, c: p(t, t.affine(L["x"], L["w"], L["b"]), c["w"][:1].repeat(3, 0))),
        _case("take", True, [("a", m)], lambda t, L, c: p(t, t.take(L["a"], 2), c["a"][:, :1])),
    ]
    missing = set(OP_KINDS) - {c.name for c in cases}
    assert not missing, f"op kinds without a gradcheck case: {missing}"
    return cases


def _supernet_case(name: str, config: SuperNetConfig, n_points: int = 6) -> GradcheckCase:
    def make(rng):
        X = rng.normal(size=(n_points, config.input_dim))
        y = np.arange(n_points) % config.num_classes
        template = init_arch(config, rng, scale=1.0)
        n_w = omega_layout(config).size

        def fun(flat):
            arch = template.with_vector(config, flat[n_w:])
            value, gw, ga = loss_and_grads(config, arch, flat[:n_w], X, y)
            return value, np.concatenate([gw, ga])

        def value(flat):
            arch = template.with_vector(config, flat[n_w:])
            return float(forward(config, arch, flat[:n_w], X, y)[0].data)

        x = np.concatenate([init_omega(config, rng), template.to_vector(config)])
        return fun, x, value

    return GradcheckCase(name, False, make)


def supernet_cases() -> list[GradcheckCase]:
    """One cell with every operator and a node-to-node edge, plus its edge-search variant."""
    base = dict(num_cells=1, nodes_per_cell=2, feature_dim=2, input_dim=2, num_classes=2)
    return [
        _supernet_case("supernet", SuperNetConfig(**base)),
        _supernet_case("supernet_edge_search", SuperNetConfig(**base, search_edges=True, inputs_per_node=2)),
    ]


def extended_supernet_cases() -> list[GradcheckCase]:
    """Stacked cells, shared and unshared; slower, so run with fewer seeds."""
    base = dict(num_cells=2, nodes_per_cell=2, feature_dim=2, input_dim=2, num_classes=2)
    return [
        _supernet_case("supernet_two_cells", SuperNetConfig(**base)),
        _supernet_case("supernet_two_cells_unshared", SuperNetConfig(**base, share_cell_params=False)),
        _supernet_case("supernet_three_classes", SuperNetConfig(**{**base, "num_classes": 3, "num_cells": 1})),
    ]


def default_cases() -> list[GradcheckCase]:
    return op_cases() + supernet_cases()


def run_suite(
    cases: Optional[Sequence[GradcheckCase]] = None,
    seeds: int = 100,
    tolerance: Optional[float] = None,
    step: float = 1e-5,
) -> list[CaseResult]:
    """Max error of every case over ``seeds`` seeds; ``tolerance`` overrides the per-case tier."""
    results = []
    for case in default_cases() if cases is None else cases:
        worst = 0.0
        for seed in range(seeds):
            fun, x, value = case.make(np.random.default_rng(seed))
            worst = max(worst, gradcheck(fun, x, step, value_fun=value))
        results.append(CaseResult(case.name, seeds, worst, case.tolerance if tolerance is None else tolerance))
    return results
