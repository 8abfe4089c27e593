"""Ground-truth hypergradients for small bi-level instances.

Two independent routes to the total derivative ``d/dalpha L_val(omega*(alpha), alpha)``:

* implicit: ``g1 - J H^{-1} v`` with dense ``H`` and ``J`` from finite
  differences of first-order gradients;
* brute force: central differences of ``alpha -> L_val(solve_inner(alpha), alpha)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffcore import ParamLayout
from .problem import BilevelProblem, NonConvergence, SingularHessian, tape_loss

logger = logging.getLogger(__name__)

MAX_DIM_OMEGA = 64
EIGEN_FLOOR = 1e-10

__all__ = [
    "MAX_DIM_OMEGA",
    "EIGEN_FLOOR",
    "DimensionCapExceeded",
    "CurvatureBundle",
    "solve_inner",
    "extract_curvature",
    "exact_g2",
    "brute_force_hypergradient",
    "inner_product_check",
    "QuadraticInstance",
    "random_quadratic_instance",
    "toy_problem",
]


class DimensionCapExceeded(ValueError):
    pass


@dataclass
class CurvatureBundle:
    H: np.ndarray  # (dim_omega, dim_omega), symmetrized
    J: np.ndarray  # (dim_alpha, dim_omega), d/dalpha of grad_omega L_train
    v: np.ndarray  # grad_omega L_val
    asymmetry: float = 0.0  # max |H - H^T| before symmetrization


def _check_cap(dim_omega: int) -> None:
    if dim_omega > MAX_DIM_OMEGA:
        raise DimensionCapExceeded(f"dim_omega={dim_omega} exceeds the dense oracle cap of {MAX_DIM_OMEGA}")


def solve_inner(
    problem: BilevelProblem,
    alpha: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    omega0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Minimize the training loss over omega to gradient norm ``<= tol``.

    Uses ``problem.inner_solution`` when given, otherwise gradient descent
    with Armijo backtracking.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    if problem.inner_solution is not None:
        omega = np.asarray(problem.inner_solution(alpha), dtype=np.float64)
        residual = float(np.linalg.norm(problem.train(omega, alpha, ("omega",)).grad_omega))
        if residual > tol:
            raise NonConvergence(0, residual)
        return omega

    omega = np.zeros(problem.dim_omega) if omega0 is None else np.array(omega0, dtype=np.float64)
    step = 1.0
    prev = None
    for it in range(max_iters):
        ev = problem.train(omega, alpha, ("omega",))
        g = ev.grad_omega
        gnorm2 = float(g @ g)
        if np.sqrt(gnorm2) <= tol:
            return omega
        if prev is not None:
            # Barzilai-Borwein trial step, then Armijo backtracking
            s, y = omega - prev[0], g - prev[1]
            sy = float(s @ y)
            step = float(s @ s) / sy if sy > 0 else 1.0
        prev = (omega, g)
        noise = 1e-12 * max(1.0, abs(ev.value))
        while True:
            trial = omega - step * g
            if step * gnorm2 < noise:
                # decrease is below loss rounding: judge by the gradient norm instead
                g_trial = problem.train(trial, alpha, ("omega",)).grad_omega
                if float(g_trial @ g_trial) < gnorm2 or step < 1e-20:
                    break
            else:
                f_trial = problem.train(trial, alpha, ()).value
                if f_trial <= ev.value - 1e-4 * step * gnorm2 or step < 1e-20:
                    break
            step *= 0.5
        omega = trial
    residual = float(np.linalg.norm(problem.train(omega, alpha, ("omega",)).grad_omega))
    if residual <= tol:
        return omega
    raise NonConvergence(max_iters, residual)


def extract_curvature(problem: BilevelProblem, omega_star, alpha, fd_step: float = 1e-4) -> CurvatureBundle:
    """Dense ``H``, ``J`` by central differences of grad_omega L_train; ``v`` by reverse mode."""
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    _check_cap(problem.dim_omega)
    omega_star = np.asarray(omega_star, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    n, m = omega_star.size, alpha.size

    H = np.zeros((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = fd_step
        gp = problem.train(omega_star + e, alpha, ("omega",)).grad_omega
        gm = problem.train(omega_star - e, alpha, ("omega",)).grad_omega
        H[:, k] = (gp - gm) / (2.0 * fd_step)
    J = np.zeros((m, n))
    for k in range(m):
        e = np.zeros(m)
        e[k] = fd_step
        gp = problem.train(omega_star, alpha + e, ("omega",)).grad_omega
        gm = problem.train(omega_star, alpha - e, ("omega",)).grad_omega
        J[k, :] = (gp - gm) / (2.0 * fd_step)
    v = problem.val(omega_star, alpha, ("omega",)).grad_omega
    asym = float(np.max(np.abs(H - H.T))) if n else 0.0
    H = 0.5 * (H + H.T)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(J)) and np.all(np.isfinite(v))):
        raise FloatingPointError("non-finite curvature entries")
    return CurvatureBundle(H, J, v, asym)


def _check_spd(H: np.ndarray) -> None:
    lam_min = float(np.linalg.eigvalsh(H)[0]) if H.size else np.inf
    if not lam_min > EIGEN_FLOOR:
        raise SingularHessian(lam_min)


def exact_g2(bundle: CurvatureBundle) -> np.ndarray:
    """``-J H^{-1} v`` by a dense symmetric solve."""
    _check_spd(bundle.H)
    u = np.linalg.solve(bundle.H, bundle.v)
    return -bundle.J @ u


def brute_force_hypergradient(problem: BilevelProblem, alpha, delta: float = 1e-3, inner_tol: float = 1e-10) -> np.ndarray:
    """Central differences of ``alpha -> L_val(solve_inner(alpha), alpha)``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    tol = min(inner_tol, delta * delta * 1e-2)
    out = np.zeros_like(alpha)
    warm = None
    for k in range(alpha.size):
        vals = []
        for sign in (1.0, -1.0):
            a = alpha.copy()
            a[k] += sign * delta
            w = solve_inner(problem, a, tol=tol, omega0=warm)
            if problem.inner_solution is None:
                warm = w
            vals.append(problem.val(w, a, ()).value)
        out[k] = (vals[0] - vals[1]) / (2.0 * delta)
    return out


def inner_product_check(bundle: CurvatureBundle, eta: float) -> dict:
    """Exact ``g2 = -J H^{-1} v`` and ``g2' = -eta J H v`` and their inner product."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    g2 = exact_g2(bundle)
    g2p = -eta * bundle.J @ (bundle.H @ bundle.v)
    return {"ip": float(g2p @ g2), "g2": g2, "g2prime": g2p}


# -- instances ------------------------------------------------------------------


@dataclass
class QuadraticInstance:
    """``L_train = 1/2 w'Pw - w'Q a``, ``L_val = 1/2 |A w + B a - c|^2``.

    The inner optimum is ``w* = P^{-1} Q a`` and the exact hypergradient is
    available in closed form from the matrices.
    """

    P: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    seed: int = 0
    kind: str = "general"

    @property
    def dim_omega(self) -> int:
        return self.P.shape[0]

    @property
    def dim_alpha(self) -> int:
        return self.Q.shape[1]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "kind": self.kind,
            "dim_omega": self.dim_omega,
            "dim_alpha": self.dim_alpha,
            "P": self.P.tolist(),
            "Q": self.Q.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "c": self.c.tolist(),
        }

    def to_json(self) -> str:
        from .serialization import canonical_json

        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticInstance":
        return cls(*(np.array(d[k], dtype=np.float64) for k in "PQABc"), seed=d.get("seed", 0), kind=d.get("kind", "general"))

    def omega_star(self, alpha) -> np.ndarray:
        return np.linalg.solve(self.P, self.Q @ np.asarray(alpha, dtype=np.float64))

    def problem(self, closed_form: bool = True) -> BilevelProblem:
        n, m = self.dim_omega, self.dim_alpha
        wl = ParamLayout([("w", (1, n))])
        al = ParamLayout([("a", (1, m))])
        P, Qt, At, Bt, c = self.P, self.Q.T, self.A.T, self.B.T, self.c[None, :]

        def train_build(tape, w, a, _batch):
            w, a = w["w"], a["a"]
            quad = tape.scale(tape.sum(tape.mul(tape.matmul(w, tape.constant(P)), w)), 0.5)
            cross = tape.sum(tape.mul(tape.matmul(a, tape.constant(Qt)), w))
            return tape.subtract(quad, cross)

        def val_build(tape, w, a, _batch):
            r = tape.add(tape.matmul(w["w"], tape.constant(At)), tape.matmul(a["a"], tape.constant(Bt)))
            return tape.scale(tape.squared_error(r, tape.constant(c)), 0.5)

        return BilevelProblem(
            dim_omega=n,
            dim_alpha=m,
            train_loss=tape_loss(train_build, wl, al),
            val_loss=tape_loss(val_build, wl, al),
            inner_solution=self.omega_star if closed_form else None,
        )

    # closed-form pieces, independent of the tape and of finite differences
    def analytic_bundle(self, alpha) -> CurvatureBundle:
        w = self.omega_star(alpha)
        v = self.A.T @ (self.A @ w + self.B @ np.asarray(alpha, float) - self.c)
        return CurvatureBundle(self.P.copy(), -self.Q.T.copy(), v)

    def analytic_hypergradient(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, float)
        dw = np.linalg.solve(self.P, self.Q)  # d omega*/d alpha, (n, m)
        r = self.A @ self.omega_star(alpha) + self.B @ alpha - self.c
        return (self.A @ dw + self.B).T @ r


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_quadratic_instance(
    seed: int,
    dim_omega: int,
    dim_alpha: int,
    kind: str = "general",
    eig_range: tuple[float, float] = (0.5, 50.0),
) -> QuadraticInstance:
    """Seeded instance generator.

    ``kind``: ``"general"`` (random SPD ``P``, random ``Q``),
    ``"identity"`` (``P = c I``) or ``"commuting"`` (``P`` and ``Q Q^T``
    share an eigenbasis, so ``H`` commutes with ``J^T J``).
    """
    _check_cap(dim_omega)
    rng = np.random.default_rng(seed)
    n, m = dim_omega, dim_alpha
    lo, hi = eig_range
    U = _orthogonal(rng, n)
    if kind == "identity":
        P = float(rng.uniform(lo, hi)) * np.eye(n)
    else:
        P = (U * rng.uniform(lo, hi, n)) @ U.T
        P = 0.5 * (P + P.T)
    if kind == "commuting":
        # J = -Q^T = V D U^T  =>  J^T J = U (D^T D) U^T, diagonal in P's eigenbasis
        V = _orthogonal(rng, m)
        D = np.zeros((m, n))
        k = min(m, n)
        D[np.arange(k), np.arange(k)] = rng.uniform(0.5, 2.0, k)
        Q = -(V @ D @ U.T).T
    elif kind in ("general", "identity"):
        Q = rng.standard_normal((n, m))
    else:
        raise ValueError(f"unknown instance kind {kind!r}")
    rows = n + m
    A = rng.standard_normal((rows, n)) / np.sqrt(n)
    B = rng.standard_normal((rows, m)) / np.sqrt(m)
    c = rng.standard_normal(rows)
    return QuadraticInstance(P, Q, A, B, c, seed=seed, kind=kind)


def toy_problem() -> BilevelProblem:
    from .problem import TOY_TRAIN_BATCH, TOY_VAL_BATCH, toy_state

    state = toy_state(0.0)
    return BilevelProblem(1, 1, state.train_loss, state.val_loss, state.inner_solution, TOY_TRAIN_BATCH, TOY_VAL_BATCH)
