"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` is built fresh for every forward pass. Leaves are registered
into named parameter groups (``"omega"``, ``"alpha"``, ...) and
:func:`backward` returns gradients for the requested groups only.

Example
-------
>>> tape = Tape()
>>> w = tape.leaf([3.0], group="omega", name="w")
>>> y = tape.sum(tape.mul(w, w))
>>> float(backward(tape, y, {"omega"})["omega"]["w"][0])
6.0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonScalarOutputError",
    "Tensor",
    "Tape",
    "ParamLayout",
    "backward",
    "gradcheck",
    "central_difference",
    "OP_KINDS",
]

OP_KINDS = (
    "add",
    "subtract",
    "mul",
    "matmul",
    "scale",
    "tanh",
    "relu",
    "softmax",
    "log",
    "sum",
    "mean",
    "squared_error",
    "softmax_cross_entropy",
    "concatenate",
    "affine",
    "take",
)


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""

    def __init__(self, kind: str, *shapes: tuple[int, ...]):
        self.kind = kind
        self.shapes = shapes
        super().__init__(f"{kind}: incompatible shapes {', '.join(map(str, shapes))}")


class NonScalarOutputError(ValueError):
    pass


@dataclass(eq=False)
class Tensor:
    """A value recorded on a tape.

    ``index`` is the position of the producing node on ``tape``.
    """

    data: np.ndarray
    tape: "Tape" = field(repr=False)
    index: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    # vjp(upstream) -> tuple of input cotangents (None for no contribution)
    vjp: Callable[[np.ndarray], tuple] | None = None
    group: str | None = None
    name: str | None = None


class Tape:
    """Append-only record of primitive operations.

    Node ``k`` only references nodes ``< k``, so the list is already in
    topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.groups: dict[str, dict[str, int]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves ---------------------------------------------------------
    def _push(self, node: _Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(node.value, self, len(self.nodes) - 1)

    def constant(self, value) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        return self._push(_Node("constant", (), arr))

    def leaf(self, value, group: str, name: str) -> Tensor:
        members = self.groups.setdefault(group, {})
        if name in members:
            raise ValueError(f"leaf {name!r} already registered in group {group!r}")
        arr = np.array(value, dtype=np.float64)
        out = self._push(_Node("leaf", (), arr, group=group, name=name))
        members[name] = out.index
        return out

    def leaves_from_flat(self, flat: np.ndarray, layout: "ParamLayout", group: str) -> dict[str, Tensor]:
        return {name: self.leaf(arr, group, name) for name, arr in layout.unflatten(flat).items()}

    def _check(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor) or t.tape is not self:
                raise TypeError("operand is not a tensor recorded on this tape")

    def record(self, kind: str, *inputs, **attrs) -> Tensor:
        """Generic entry point: ``record("add", a, b)`` == ``add(a, b)``."""
        if kind not in OP_KINDS:
            raise ValueError(f"unsupported op-kind {kind!r}")
        return getattr(self, kind)(*inputs, **attrs)

    def _op(self, kind, inputs: Sequence[Tensor], value, vjp) -> Tensor:
        return self._push(_Node(kind, tuple(t.index for t in inputs), value, vjp))

    # -- elementwise ----------------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError("add", a.shape, b.shape)
        return self._op("add", (a, b), a.data + b.data, lambda g: (g, g))

    def subtract(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError("subtract", a.shape, b.shape)
        return self._op("subtract", (a, b), a.data - b.data, lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError("mul", a.shape, b.shape)
        x, y = a.data, b.data
        return self._op("mul", (a, b), x * y, lambda g: (g * y, g * x))

    def scale(self, a: Tensor, s) -> Tensor:
        """Multiply ``a`` by a python scalar or by a single-element tensor."""
        if isinstance(s, Tensor):
            self._check(a, s)
            if s.data.size != 1:
                raise ShapeError("scale", a.shape, s.shape)
            x, c = a.data, s.data
            sv = c.reshape(())
            return self._op(
                "scale", (a, s), x * sv, lambda g: (g * sv, np.reshape(np.sum(g * x), c.shape))
            )
        self._check(a)
        c = float(s)
        return self._op("scale", (a,), a.data * c, lambda g: (g * c,))

    def tanh(self, a: Tensor) -> Tensor:
        self._check(a)
        y = np.tanh(a.data)
        return self._op("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def relu(self, a: Tensor) -> Tensor:
        self._check(a)
        mask = a.data > 0.0  # subgradient 0 at the kink
        return self._op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (np.where(mask, g, 0.0),))

    def log(self, a: Tensor) -> Tensor:
        self._check(a)
        x = a.data
        return self._op("log", (a,), np.log(x), lambda g: (g / x,))

    def softmax(self, a: Tensor) -> Tensor:
        self._check(a)
        if a.data.ndim == 0:
            raise ShapeError("softmax", a.shape)
        z = a.data - np.max(a.data, axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=-1, keepdims=True)

        def vjp(g):
            return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

        return self._op("softmax", (a,), y, vjp)

    # -- reductions -----------------------------------------------------
    def sum(self, a: Tensor) -> Tensor:
        self._check(a)
        shape = a.shape
        return self._op("sum", (a,), np.array(np.sum(a.data)), lambda g: (np.full(shape, float(g)),))

    def mean(self, a: Tensor) -> Tensor:
        self._check(a)
        shape, n = a.shape, a.data.size
        if n == 0:
            raise ShapeError("mean", shape)
        return self._op("mean", (a,), np.array(np.mean(a.data)), lambda g: (np.full(shape, float(g) / n),))

    def squared_error(self, a: Tensor, b: Tensor) -> Tensor:
        """Sum of squared differences, a scalar."""
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError("squared_error", a.shape, b.shape)
        d = a.data - b.data
        return self._op(
            "squared_error", (a, b), np.array(np.sum(d * d)), lambda g: (2.0 * float(g) * d, -2.0 * float(g) * d)
        )

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean cross-entropy of ``logits`` (batch, classes) against integer labels."""
        self._check(logits)
        labels = np.asarray(labels)
        if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
        if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise ValueError("softmax_cross_entropy: labels must be integer class indices")
        z = logits.data - np.max(logits.data, axis=1, keepdims=True)
        logsum = np.log(np.sum(np.exp(z), axis=1))
        rows = np.arange(len(labels))
        n = len(labels)
        loss = np.mean(logsum - z[rows, labels])
        p = np.exp(z - logsum[:, None])

        def vjp(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * (float(g) / n),)

        return self._op("softmax_cross_entropy", (logits,), np.array(loss), vjp)

    # -- linear algebra / structure ------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        x, y = a.data, b.data
        return self._op("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """``x @ w + b`` with ``b`` broadcast over rows."""
        self._check(x, w, b)
        if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError("affine", x.shape, w.shape, b.shape)
        xv, wv = x.data, w.data
        return self._op("affine", (x, w, b), xv @ wv + b.data, lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))

    def concatenate(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the last axis."""
        parts = list(parts)
        if not parts:
            raise ShapeError("concatenate")
        self._check(*parts)
        lead = parts[0].shape[:-1]
        if any(p.data.ndim == 0 or p.shape[:-1] != lead for p in parts):
            raise ShapeError("concatenate", *(p.shape for p in parts))
        widths = [p.shape[-1] for p in parts]
        cuts = np.cumsum(widths)[:-1]
        return self._op(
            "concatenate", parts, np.concatenate([p.data for p in parts], axis=-1),
            lambda g: tuple(np.split(g, cuts, axis=-1)),
        )

    def take(self, a: Tensor, index: int) -> Tensor:
        """Element ``index`` along the last axis, keeping a trailing axis of size 1."""
        self._check(a)
        if a.data.ndim == 0 or not -a.shape[-1] <= index < a.shape[-1]:
            raise ShapeError("take", a.shape)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[..., index] = g[..., 0]
            return (out,)

        return self._op("take", (a,), a.data[..., index : index + 1].copy(), vjp)


class ParamLayout:
    """Ordered name -> shape map used to move between flat vectors and named arrays."""

    def __init__(self, shapes: Iterable[tuple[str, tuple[int, ...]]]):
        self.shapes: dict[str, tuple[int, ...]] = {}
        self.offsets: dict[str, int] = {}
        size = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            self.shapes[name] = shape
            self.offsets[name] = size
            size += math.prod(shape)
        self.size = size

    def __len__(self) -> int:
        return self.size

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def names(self) -> list[str]:
        return list(self.shapes)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError("unflatten", flat.shape, (self.size,))
        return {
            name: flat[self.offsets[name] : self.offsets[name] + math.prod(shape)].reshape(shape)
            for name, shape in self.shapes.items()
        }

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        out = np.zeros(self.size)
        for name, shape in self.shapes.items():
            arr = arrays.get(name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError("flatten", arr.shape, shape)
            out[self.offsets[name] : self.offsets[name] + arr.size] = arr.ravel()
        return out


def backward(tape: Tape, output: Tensor, groups: Iterable[str]) -> dict[str, dict[str, np.ndarray]]:
    """Reverse-mode gradients of scalar ``output`` for every leaf in ``groups``.

    Returns ``{group: {leaf name: gradient}}``. Leaves in other groups are
    never differentiated; nodes that cannot reach a requested leaf are skipped.
    """
    if output.tape is not tape:
        raise TypeError("output was not recorded on this tape")
    if output.data.size != 1:
        raise NonScalarOutputError(f"backward needs a scalar output, got shape {output.shape}")
    groups = list(groups)
    for g in groups:
        if g not in tape.groups:
            raise KeyError(f"unknown parameter group {g!r}")

    nodes = tape.nodes
    wanted = {idx for g in groups for idx in tape.groups[g].values()}
    needed = [False] * (output.index + 1)
    for k in range(output.index + 1):
        node = nodes[k]
        needed[k] = k in wanted or any(needed[i] for i in node.inputs)

    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.data)}
    for k in range(output.index, -1, -1):
        g = grads.get(k)
        node = nodes[k]
        if g is None or node.vjp is None or not needed[k]:
            continue
        for i, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not needed[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi

    bundle: dict[str, dict[str, np.ndarray]] = {}
    for g in groups:
        bundle[g] = {
            name: np.array(grads[idx], dtype=np.float64) if idx in grads else np.zeros_like(nodes[idx].value)
            for name, idx in tape.groups[g].items()
        }
    return bundle


def central_difference(fun: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fun`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += step
        xm.flat[j] -= step
        grad.flat[j] = (fun(xp) - fun(xm)) / (2.0 * step)
    return grad


def gradcheck(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float = 1e-5,
    value_fun: Optional[Callable[[np.ndarray], float]] = None,
) -> float:
    """Max over coordinates of ``|autodiff - central| / max(1, |central|)``.

    ``fun`` maps a flat vector to ``(value, gradient)``. ``value_fun``, if
    given, is a cheaper value-only version used for the differences.
    Non-finite values anywhere make the result ``inf``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(all="ignore"):
        try:
            _, analytic = fun(x)
            numeric = central_difference(value_fun or (lambda z: float(fun(z)[0])), x, step)
        except (FloatingPointError, OverflowError, ZeroDivisionError):
            return math.inf
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = numeric.ravel()
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return math.inf
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err))
