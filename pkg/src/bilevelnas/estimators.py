"""Architectural-gradient estimators.

All estimators return ``g1 + g2_hat`` where ``g1`` is the direct gradient of
the validation loss w.r.t. alpha and ``g2_hat`` approximates the implicit
term ``-J H^{-1} v`` with ``J = d/dalpha grad_omega L_train``,
``H = grad^2_omega L_train`` and ``v = grad_omega L_val``:

* first order: ``g2_hat = 0``
* second-order DARTS: ``H^{-1} -> xi * I``
* amended: ``H^{-1} -> eta * H``

Only first-order gradients are ever taken; curvature enters through central
finite differences with ``eps = 0.01 / ||v||``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .problem import BilevelProblem, BilevelState, DegenerateDirection

logger = logging.getLogger(__name__)

__all__ = [
    "FirstOrder",
    "SecondOrderDarts",
    "Amended",
    "ExactImplicit",
    "BruteForce",
    "EstimatorKind",
    "parse_estimator",
    "g1",
    "epsilon_scale",
    "amended_g2",
    "second_order_darts_g2",
    "estimate_parts",
    "estimate_arch_gradient",
]


@dataclass(frozen=True)
class FirstOrder:
    name = "first-order"


@dataclass(frozen=True)
class SecondOrderDarts:
    # None means "use the omega learning rate", resolved by the search loop
    xi: Optional[float] = None
    name = "second-order"

    def __post_init__(self):
        if self.xi is not None and not self.xi > 0:
            raise ValueError("xi must be positive")


@dataclass(frozen=True)
class Amended:
    # eta == 0 is accepted and short-circuits to the first-order estimate
    eta: float = 0.1
    name = "amended"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")


@dataclass(frozen=True)
class ExactImplicit:
    fd_step: float = 1e-4
    name = "exact"

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


@dataclass(frozen=True)
class BruteForce:
    delta: float = 1e-3
    name = "brute-force"

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")


EstimatorKind = Union[FirstOrder, SecondOrderDarts, Amended, ExactImplicit, BruteForce]

_NAMES = {
    "first-order": FirstOrder,
    "first_order": FirstOrder,
    "second-order": SecondOrderDarts,
    "second_order": SecondOrderDarts,
    "darts": SecondOrderDarts,
    "amended": Amended,
    "exact": ExactImplicit,
    "exact-implicit": ExactImplicit,
    "brute-force": BruteForce,
    "brute_force": BruteForce,
}


def parse_estimator(name: str, eta: float | None = None, xi: float | None = None) -> EstimatorKind:
    try:
        cls = _NAMES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown estimator {name!r}; choose from {sorted(set(_NAMES))}") from None
    if cls is Amended:
        return Amended() if eta is None else Amended(eta)
    if cls is SecondOrderDarts:
        return SecondOrderDarts() if xi is None else SecondOrderDarts(xi)
    return cls()


def describe(kind: EstimatorKind) -> dict:
    d = {"name": kind.name}
    d.update(vars(kind))
    return d


def g1(state: BilevelState, val_batch) -> np.ndarray:
    """Partial gradient of the validation loss w.r.t. alpha at the current omega."""
    return state.evaluate("val", val_batch, {"alpha"}).grad_alpha


def epsilon_scale(val_omega_grad: np.ndarray) -> float:
    norm = float(np.linalg.norm(val_omega_grad))
    if norm == 0.0:
        raise DegenerateDirection("validation gradient w.r.t. omega is zero")
    return 0.01 / norm


def _train_grad(state, batch, group, omega):
    ev = state.evaluate("train", batch, {group}, omega=omega)
    return ev.grad_omega if group == "omega" else ev.grad_alpha


def _mixed_fd(state: BilevelState, direction: np.ndarray, eps: float, train_batch) -> np.ndarray:
    """``[grad_a L_train(w + d) - grad_a L_train(w - d)] / (2 eps)``, roughly ``J d / eps``."""
    ga_plus = _train_grad(state, train_batch, "alpha", state.omega + direction)
    ga_minus = _train_grad(state, train_batch, "alpha", state.omega - direction)
    return (ga_plus - ga_minus) / (2.0 * eps)


def amended_g2(state: BilevelState, eta: float, train_batch, val_batch, v: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference estimate of ``-eta * J H v``.

    Two nested central differences share one ``eps``: the first turns
    ``v`` into ``H v``; the second perturbs omega by ``+-(1/2)`` of the raw
    gradient difference, i.e. by ``eps * H v``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if v is None:
        v = state.evaluate("val", val_batch, {"omega"}).grad_omega
    try:
        eps = epsilon_scale(v)
    except DegenerateDirection:
        logger.warning("zero validation gradient w.r.t. omega; amended term set to 0")
        return np.zeros_like(state.alpha)
    gw_plus = _train_grad(state, train_batch, "omega", state.omega + eps * v)
    gw_minus = _train_grad(state, train_batch, "omega", state.omega - eps * v)
    half_diff = 0.5 * (gw_plus - gw_minus)
    return -eta * _mixed_fd(state, half_diff, eps, train_batch)


def second_order_darts_g2(state: BilevelState, xi: float, train_batch, val_batch, v: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference estimate of ``-xi * J v``."""
    if not xi > 0:
        raise ValueError("xi must be positive")
    if v is None:
        v = state.evaluate("val", val_batch, {"omega"}).grad_omega
    try:
        eps = epsilon_scale(v)
    except DegenerateDirection:
        logger.warning("zero validation gradient w.r.t. omega; second-order term set to 0")
        return np.zeros_like(state.alpha)
    return -xi * _mixed_fd(state, eps * v, eps, train_batch)


def estimate_parts(kind: EstimatorKind, state: BilevelState, train_batch, val_batch) -> tuple[np.ndarray, np.ndarray]:
    """``(g1, g2_hat)`` for ``kind``; the estimate is their sum."""
    if isinstance(kind, (ExactImplicit, BruteForce)):
        from . import oracle

        problem = BilevelProblem.from_state(state, train_batch, val_batch)
        if isinstance(kind, BruteForce):
            total = oracle.brute_force_hypergradient(problem, state.alpha, kind.delta)
            direct = g1(state, val_batch)
            return direct, total - direct
        bundle = oracle.extract_curvature(problem, state.omega, state.alpha, kind.fd_step)
        return g1(state, val_batch), oracle.exact_g2(bundle)

    ev = state.evaluate("val", val_batch, {"omega", "alpha"})
    direct = ev.grad_alpha
    if isinstance(kind, FirstOrder) or (isinstance(kind, Amended) and kind.eta == 0):
        return direct, np.zeros_like(direct)
    if isinstance(kind, Amended):
        return direct, amended_g2(state, kind.eta, train_batch, val_batch, v=ev.grad_omega)
    if isinstance(kind, SecondOrderDarts):
        if kind.xi is None:
            raise ValueError("SecondOrderDarts.xi is unresolved; pass xi explicitly")
        return direct, second_order_darts_g2(state, kind.xi, train_batch, val_batch, v=ev.grad_omega)
    raise TypeError(f"unknown estimator kind {kind!r}")


def estimate_arch_gradient(kind: EstimatorKind, state: BilevelState, train_batch, val_batch) -> np.ndarray:
    """Architectural gradient ``g1 + g2_hat`` for the chosen estimator."""
    direct, implicit = estimate_parts(kind, state, train_batch, val_batch)
    if isinstance(kind, FirstOrder) or (isinstance(kind, Amended) and kind.eta == 0):
        return direct
    return direct + implicit
