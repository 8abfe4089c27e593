"""Bi-level problem containers shared by the estimators and the oracle."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

import numpy as np

from .diffcore import ParamLayout, Tape, backward

__all__ = [
    "Evaluation",
    "LossFn",
    "BilevelState",
    "BilevelProblem",
    "DegenerateDirection",
    "NonFiniteLoss",
    "NonConvergence",
    "SingularHessian",
    "Diverged",
    "tape_loss",
    "toy_loss",
    "toy_state",
]


class DegenerateDirection(ArithmeticError):
    """The validation gradient w.r.t. omega is zero, so no FD direction exists."""


class NonFiniteLoss(ArithmeticError):
    pass


class NonConvergence(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"inner solve did not converge: {iterations} iterations, residual {residual:.3e}")


class SingularHessian(np.linalg.LinAlgError):
    def __init__(self, min_eigenvalue: float):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"Hessian is singular or indefinite: smallest eigenvalue {min_eigenvalue:.3e}")


class Diverged(RuntimeError):
    def __init__(self, step: int, value: float = float("nan"), trajectory: Any = None):
        self.step = step
        self.value = value
        self.trajectory = trajectory
        super().__init__(f"diverged at step {step} (value {value!r})")


@dataclass
class Evaluation:
    value: float
    grad_omega: Optional[np.ndarray] = None
    grad_alpha: Optional[np.ndarray] = None


# (omega, alpha, batch, groups) -> Evaluation; groups is a subset of {"omega", "alpha"}
LossFn = Callable[[np.ndarray, np.ndarray, Any, frozenset], Evaluation]


def tape_loss(build: Callable, omega_layout: ParamLayout, alpha_layout: ParamLayout) -> LossFn:
    """Wrap a graph builder into a :data:`LossFn`.

    ``build(tape, omega_leaves, alpha_leaves, batch)`` records the loss and
    returns the scalar output tensor. Leaves are dicts keyed by layout name.
    """

    def fn(omega, alpha, batch, groups=frozenset({"omega", "alpha"})):
        tape = Tape()
        w = tape.leaves_from_flat(omega, omega_layout, "omega")
        a = tape.leaves_from_flat(alpha, alpha_layout, "alpha")
        out = build(tape, w, a, batch)
        value = float(out.data.reshape(()))
        if not np.isfinite(value):
            return Evaluation(value)
        grads = backward(tape, out, groups) if groups else {}
        return Evaluation(
            value,
            omega_layout.flatten(grads["omega"]) if "omega" in grads else None,
            alpha_layout.flatten(grads["alpha"]) if "alpha" in grads else None,
        )

    return fn


@dataclass
class BilevelState:
    """Current point of a bi-level problem plus access to both losses."""

    omega: np.ndarray
    alpha: np.ndarray
    train_loss: LossFn
    val_loss: LossFn
    inner_solution: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.omega = np.array(self.omega, dtype=np.float64).ravel()
        self.alpha = np.array(self.alpha, dtype=np.float64).ravel()

    def evaluate(self, which: str, batch, groups, omega=None, alpha=None) -> Evaluation:
        fn = self.train_loss if which == "train" else self.val_loss
        ev = fn(self.omega if omega is None else omega, self.alpha if alpha is None else alpha, batch, frozenset(groups))
        if not np.isfinite(ev.value):
            raise NonFiniteLoss(f"{which} loss is not finite: {ev.value!r}")
        return ev

    def with_point(self, omega=None, alpha=None) -> "BilevelState":
        return replace(
            self,
            omega=self.omega if omega is None else omega,
            alpha=self.alpha if alpha is None else alpha,
        )


@dataclass
class BilevelProblem:
    """A bi-level instance small enough for dense ground-truth hypergradients."""

    dim_omega: int
    dim_alpha: int
    train_loss: LossFn
    val_loss: LossFn
    inner_solution: Optional[Callable[[np.ndarray], np.ndarray]] = None
    train_batch: Any = None
    val_batch: Any = None

    @classmethod
    def from_state(cls, state: BilevelState, train_batch=None, val_batch=None) -> "BilevelProblem":
        return cls(
            dim_omega=state.omega.size,
            dim_alpha=state.alpha.size,
            train_loss=state.train_loss,
            val_loss=state.val_loss,
            inner_solution=state.inner_solution,
            train_batch=train_batch,
            val_batch=val_batch,
        )

    def train(self, omega, alpha, groups=("omega", "alpha")) -> Evaluation:
        return self.train_loss(np.asarray(omega, float), np.asarray(alpha, float), self.train_batch, frozenset(groups))

    def val(self, omega, alpha, groups=("omega", "alpha")) -> Evaluation:
        return self.val_loss(np.asarray(omega, float), np.asarray(alpha, float), self.val_batch, frozenset(groups))


_SCALAR = ParamLayout([("w", (1,))])
_SCALAR_ALPHA = ParamLayout([("a", (1,))])


def _toy_build(tape, w, a, x):
    return tape.squared_error(tape.scale(w["w"], float(x)), a["a"])


# L(w, a; x) = (w * x - a)^2 on a single sample x
toy_loss: LossFn = tape_loss(_toy_build, _SCALAR, _SCALAR_ALPHA)


def toy_state(alpha: float, omega: Optional[float] = None) -> BilevelState:
    """Toy instance: train sample x=1, val sample x=2; inner optimum omega*(a)=a."""
    omega = alpha if omega is None else omega
    return BilevelState(
        omega=np.array([omega]),
        alpha=np.array([alpha]),
        train_loss=toy_loss,
        val_loss=toy_loss,
        inner_solution=lambda a: np.array(a, dtype=np.float64).copy(),
    )


TOY_TRAIN_BATCH = 1.0
TOY_VAL_BATCH = 2.0
