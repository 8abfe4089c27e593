"""Toy differentiable super-network.

A cell has ``input_nodes`` input nodes followed by ``nodes_per_cell``
intermediate nodes. Every edge ``(i, j)`` carries a softmax-weighted mixture
of candidate operators; an intermediate node sums its incoming edges (or, with
edge search on, mixes input combinations with softmax(beta) weights). The
cell output is the mean of its intermediate nodes.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffcore import ParamLayout, ShapeError, Tape, Tensor, backward

__all__ = [
    "OperatorKind",
    "SuperNetConfig",
    "ArchParams",
    "Genotype",
    "mixed_edge_output",
    "node_output_edge_search",
    "omega_layout",
    "init_omega",
    "init_arch",
    "forward",
    "predict_logits",
    "discretize",
    "degeneration_metrics",
    "discrete_layout",
    "discrete_forward",
]


class OperatorKind(enum.IntEnum):
    NONE = 0
    SKIP_CONNECT = 1
    LINEAR = 2
    NONLINEAR = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def parametric(self) -> bool:
        return self in (OperatorKind.LINEAR, OperatorKind.NONLINEAR)

    @classmethod
    def parse(cls, value) -> "OperatorKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"skip": "skip_connect", "identity": "skip_connect", "zero": "none"}
        return cls[aliases.get(key, key).upper()]


ALL_OPERATORS = tuple(OperatorKind)


def _default_edges(input_nodes: int, nodes_per_cell: int) -> tuple[tuple[int, int], ...]:
    total = input_nodes + nodes_per_cell
    return tuple((i, j) for j in range(input_nodes, total) for i in range(j))


@dataclass(frozen=True)
class SuperNetConfig:
    num_cells: int = 2
    nodes_per_cell: int = 2
    feature_dim: int = 4
    input_dim: int = 2
    num_classes: int = 2
    edges: Optional[tuple[tuple[int, int], ...]] = None
    share_cell_params: bool = True
    operators: tuple[OperatorKind, ...] = ALL_OPERATORS
    inputs_per_node: int = 2
    input_nodes: int = 2
    prune_edges: bool = True
    # beta logits active (edge search); alpha logits trainable (operator search)
    search_edges: bool = False
    search_ops: bool = True
    # feed equal input_dim / input_nodes blocks of x straight into the input nodes, no stem
    split_input: bool = False
    # per cell-group subset of ``edges`` that is present; None means all
    active_edges: Optional[tuple[tuple[tuple[int, int], ...], ...]] = None

    def __post_init__(self):
        ops = tuple(sorted({OperatorKind.parse(o) for o in self.operators}))
        object.__setattr__(self, "operators", ops)
        edges = self.edges if self.edges is not None else _default_edges(self.input_nodes, self.nodes_per_cell)
        edges = tuple(sorted({(int(i), int(j)) for i, j in edges}, key=lambda e: (e[1], e[0])))
        object.__setattr__(self, "edges", edges)
        for name in ("num_cells", "nodes_per_cell", "feature_dim", "input_dim", "num_classes",
                     "inputs_per_node", "input_nodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not ops:
            raise ValueError("operator set is empty")
        if all(o == OperatorKind.NONE for o in ops):
            raise ValueError("operator set needs at least one operator besides none")
        total = self.input_nodes + self.nodes_per_cell
        for i, j in edges:
            if not (0 <= i < j < total) or j < self.input_nodes:
                raise ValueError(f"invalid edge {(i, j)}: need i < j and j an intermediate node")
        if self.split_input and self.input_dim != self.input_nodes * self.feature_dim:
            raise ValueError("split_input needs input_dim == input_nodes * feature_dim")
        if self.active_edges is not None:
            active = tuple(tuple(sorted({tuple(e) for e in grp}, key=lambda e: (e[1], e[0]))) for grp in self.active_edges)
            if len(active) != self.num_groups:
                raise ValueError("active_edges needs one entry per cell group")
            for grp in active:
                if not set(grp) <= set(edges):
                    raise ValueError("active_edges must be a subset of edges")
            object.__setattr__(self, "active_edges", active)
        if self.search_edges:
            for j in self.intermediate_nodes:
                if not self.combinations(j):
                    raise ValueError(f"node {j} has fewer than {self.inputs_per_node} candidate inputs")

    @property
    def num_groups(self) -> int:
        return 1 if self.share_cell_params else self.num_cells

    @property
    def intermediate_nodes(self) -> range:
        return range(self.input_nodes, self.input_nodes + self.nodes_per_cell)

    @property
    def num_ops(self) -> int:
        return len(self.operators)

    def group_of(self, cell: int) -> int:
        return 0 if self.share_cell_params else cell

    def incoming(self, j: int) -> list[int]:
        """Indices into ``edges`` of edges ending at node ``j``."""
        return [k for k, (_, dst) in enumerate(self.edges) if dst == j]

    def is_active(self, group: int, edge: tuple[int, int]) -> bool:
        return self.active_edges is None or edge in self.active_edges[group]

    def combinations(self, j: int) -> list[tuple[int, ...]]:
        """Candidate input combinations of node ``j``, in lexicographic order."""
        preds = sorted(self.edges[k][0] for k in self.incoming(j))
        return list(itertools.combinations(preds, self.inputs_per_node))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["operators"] = [o.label for o in self.operators]
        d["edges"] = [list(e) for e in self.edges]
        if self.active_edges is not None:
            d["active_edges"] = [[list(e) for e in grp] for grp in self.active_edges]
        return d


@dataclass
class ArchParams:
    """Operator logits ``alpha[group, edge, op]`` and per-node combination logits ``beta``."""

    alpha: np.ndarray
    beta: dict[int, np.ndarray] = field(default_factory=dict)  # node j -> (groups, combos)

    def copy(self) -> "ArchParams":
        return ArchParams(self.alpha.copy(), {j: b.copy() for j, b in self.beta.items()})

    @staticmethod
    def layout(config: SuperNetConfig) -> ParamLayout:
        """Layout of the outer (trainable architecture) vector for ``config``."""
        shapes = []
        if config.search_ops:
            for g in range(config.num_groups):
                for e in range(len(config.edges)):
                    shapes.append((f"alpha.g{g}.e{e}", (config.num_ops,)))
        if config.search_edges:
            for g in range(config.num_groups):
                for j in config.intermediate_nodes:
                    shapes.append((f"beta.g{g}.n{j}", (len(config.combinations(j)),)))
        return ParamLayout(shapes)

    def to_vector(self, config: SuperNetConfig) -> np.ndarray:
        return ArchParams.layout(config).flatten(self._named(config))

    def _named(self, config):
        named = {}
        for g in range(config.num_groups):
            for e in range(len(config.edges)):
                named[f"alpha.g{g}.e{e}"] = self.alpha[g, e]
            for j, b in self.beta.items():
                named[f"beta.g{g}.n{j}"] = b[g]
        return named

    def with_vector(self, config: SuperNetConfig, vec: np.ndarray) -> "ArchParams":
        out = self.copy()
        for name, arr in ArchParams.layout(config).unflatten(vec).items():
            kind, g, rest = name.split(".")
            g = int(g[1:])
            if kind == "alpha":
                out.alpha[g, int(rest[1:])] = arr
            else:
                out.beta[int(rest[1:])][g] = arr
        return out

    def edge_weights(self, config: SuperNetConfig) -> np.ndarray:
        z = self.alpha - self.alpha.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(np.ascontiguousarray(self.alpha, dtype="<f8").tobytes())
        for j in sorted(self.beta):
            h.update(np.ascontiguousarray(self.beta[j], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Genotype:
    """Per cell group, per intermediate node: ``((input node, operator), ...)``."""

    cells: tuple[tuple[tuple[int, tuple[tuple[int, OperatorKind], ...]], ...], ...]

    def edges(self, group: int) -> list[tuple[int, int, OperatorKind]]:
        return [(i, j, op) for j, inputs in self.cells[group] for i, op in inputs]

    def all_ops(self) -> list[OperatorKind]:
        return [op for g in range(len(self.cells)) for _, _, op in self.edges(g)]

    def to_dict(self) -> dict:
        return {
            "cells": [
                {"nodes": [{"node": j, "inputs": [[i, op.label] for i, op in inputs]} for j, inputs in cell]}
                for cell in self.cells
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        return cls(tuple(
            tuple((int(n["node"]), tuple((int(i), OperatorKind.parse(op)) for i, op in n["inputs"])) for n in cell["nodes"])
            for cell in d["cells"]
        ))

    def to_json(self) -> str:
        from .serialization import canonical_json

        return canonical_json(self.to_dict())


# -- graph pieces ---------------------------------------------------------


def _apply_op(tape: Tape, op: OperatorKind, x: Tensor, params: dict, prefix: str) -> Optional[Tensor]:
    if op == OperatorKind.NONE:
        return None
    if op == OperatorKind.SKIP_CONNECT:
        return x
    y = tape.affine(x, params[f"{prefix}.{op.label}.W"], params[f"{prefix}.{op.label}.b"])
    return tape.tanh(y) if op == OperatorKind.NONLINEAR else y


def _zeros(tape: Tape, x: Tensor) -> Tensor:
    return tape.constant(np.zeros(x.shape))


def mixed_edge_output(
    tape: Tape,
    x: Tensor,
    logits: Tensor,
    params: dict,
    operators: Sequence[OperatorKind],
    prefix: str = "edge",
) -> Tensor:
    """``sum_o softmax(logits)_o * o(x)`` for ``x`` of shape (batch, dim).

    ``params`` maps ``f"{prefix}.{op}.W"`` / ``.b`` to tensors for the
    parametric operators.
    """
    if x.data.ndim != 2:
        raise ShapeError("mixed_edge_output", x.shape)
    if logits.shape != (len(operators),):
        raise ShapeError("mixed_edge_output", x.shape, logits.shape)
    weights = tape.softmax(logits)
    out = None
    for k, op in enumerate(operators):
        y = _apply_op(tape, op, x, params, prefix)
        if y is None:
            continue
        term = tape.scale(y, tape.take(weights, k))
        out = term if out is None else tape.add(out, term)
    return _zeros(tape, x) if out is None else out


def node_output_edge_search(
    tape: Tape,
    inputs: dict[int, Tensor],
    beta: Tensor,
    combinations: Sequence[tuple[int, ...]],
) -> Tensor:
    """``sum_c softmax(beta)_c * sum_{i in c} y_i`` over candidate combinations."""
    if not combinations:
        raise ValueError("node has no candidate input combinations")
    if beta.shape != (len(combinations),):
        raise ShapeError("node_output_edge_search", beta.shape, (len(combinations),))
    for combo in combinations:
        for i in combo:
            if i not in inputs:
                raise KeyError(f"combination {combo} references missing input {i}")
    weights = tape.softmax(beta)
    out = None
    for k, combo in enumerate(combinations):
        s = inputs[combo[0]]
        for i in combo[1:]:
            s = tape.add(s, inputs[i])
        term = tape.scale(s, tape.take(weights, k))
        out = term if out is None else tape.add(out, term)
    return out


# -- parameters -------------------------------------------------------------


def _edge_prefix(cell: int, edge: tuple[int, int]) -> str:
    return f"cell{cell}.e{edge[0]}_{edge[1]}"


def omega_layout(config: SuperNetConfig) -> ParamLayout:
    d = config.feature_dim
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if not config.split_input:
        shapes += [("stem.W", (config.input_dim, d)), ("stem.b", (d,))]
    for c in range(config.num_cells):
        g = config.group_of(c)
        for edge in config.edges:
            if not config.is_active(g, edge):
                continue
            for op in config.operators:
                if op.parametric:
                    p = f"{_edge_prefix(c, edge)}.{op.label}"
                    shapes += [(f"{p}.W", (d, d)), (f"{p}.b", (d,))]
    shapes += [("head.W", (d, config.num_classes)), ("head.b", (config.num_classes,))]
    return ParamLayout(shapes)


def _init_from_layout(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    arrays = {}
    for name, shape in layout.shapes.items():
        if name.endswith(".W"):
            arrays[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            arrays[name] = np.zeros(shape)
    return layout.flatten(arrays)


def init_omega(config: SuperNetConfig, rng: np.random.Generator) -> np.ndarray:
    return _init_from_layout(omega_layout(config), rng)


def init_arch(config: SuperNetConfig, rng: Optional[np.random.Generator] = None, scale: float = 1e-3) -> ArchParams:
    """Small random logits (exactly zero when ``rng`` is None or the logits are frozen)."""
    g, e, k = config.num_groups, len(config.edges), config.num_ops
    alpha = np.zeros((g, e, k))
    if rng is not None and config.search_ops:
        alpha = scale * rng.standard_normal((g, e, k))
    beta = {}
    if config.search_edges:
        for j in config.intermediate_nodes:
            n = len(config.combinations(j))
            beta[j] = scale * rng.standard_normal((g, n)) if rng is not None else np.zeros((g, n))
    return ArchParams(alpha, beta)


# -- forward ----------------------------------------------------------------


def _input_states(tape: Tape, config: SuperNetConfig, w: dict, X: np.ndarray) -> list[Tensor]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise ShapeError("forward", X.shape, (len(X), config.input_dim))
    if config.split_input:
        d = config.feature_dim
        return [tape.constant(X[:, i * d : (i + 1) * d]) for i in range(config.input_nodes)]
    s = tape.affine(tape.constant(X), w["stem.W"], w["stem.b"])
    return [s] * config.input_nodes


def _network(tape: Tape, config: SuperNetConfig, w: dict, arch_t: dict, X: np.ndarray) -> Tensor:
    states = _input_states(tape, config, w, X)
    for c in range(config.num_cells):
        g = config.group_of(c)
        nodes: dict[int, Tensor] = {i: s for i, s in enumerate(states[-config.input_nodes :])}
        for j in config.intermediate_nodes:
            edge_out: dict[int, Tensor] = {}
            for k in config.incoming(j):
                edge = config.edges[k]
                if not config.is_active(g, edge):
                    continue
                edge_out[edge[0]] = mixed_edge_output(
                    tape, nodes[edge[0]], arch_t["alpha"][g, k], w, config.operators, _edge_prefix(c, edge)
                )
            if config.search_edges:
                nodes[j] = node_output_edge_search(tape, edge_out, arch_t["beta"][g, j], config.combinations(j))
            elif edge_out:
                acc = None
                for i in sorted(edge_out):
                    acc = edge_out[i] if acc is None else tape.add(acc, edge_out[i])
                nodes[j] = acc
            else:
                nodes[j] = _zeros(tape, states[-1])
        acc = None
        for j in config.intermediate_nodes:
            acc = nodes[j] if acc is None else tape.add(acc, nodes[j])
        states.append(tape.scale(acc, 1.0 / config.nodes_per_cell))
    return tape.affine(states[-1], w["head.W"], w["head.b"])


def _arch_tensors(tape: Tape, config: SuperNetConfig, arch: ArchParams, trainable: bool) -> dict:
    out = {"alpha": {}, "beta": {}}
    for g in range(config.num_groups):
        for e in range(len(config.edges)):
            name = f"alpha.g{g}.e{e}"
            if trainable and config.search_ops:
                out["alpha"][g, e] = tape.leaf(arch.alpha[g, e], "alpha", name)
            else:
                out["alpha"][g, e] = tape.constant(arch.alpha[g, e])
        if config.search_edges:
            for j in config.intermediate_nodes:
                name = f"beta.g{g}.n{j}"
                if trainable:
                    out["beta"][g, j] = tape.leaf(arch.beta[j][g], "alpha", name)
                else:
                    out["beta"][g, j] = tape.constant(arch.beta[j][g])
    return out


def forward(config: SuperNetConfig, arch: ArchParams, omega: np.ndarray, X, y) -> tuple[Tensor, Tape]:
    """Mean softmax cross-entropy of the super-network on ``(X, y)``.

    The returned tape has groups ``"omega"`` (network weights) and ``"alpha"``
    (the trainable architecture logits, including beta when edge search is on).
    """
    tape = Tape()
    w = tape.leaves_from_flat(omega, omega_layout(config), "omega")
    a = _arch_tensors(tape, config, arch, trainable=True)
    tape.groups.setdefault("alpha", {})
    logits = _network(tape, config, w, a, X)
    return tape.softmax_cross_entropy(logits, np.asarray(y)), tape


def predict_logits(config: SuperNetConfig, arch: ArchParams, omega: np.ndarray, X) -> np.ndarray:
    tape = Tape()
    w = {k: tape.constant(v) for k, v in omega_layout(config).unflatten(omega).items()}
    a = _arch_tensors(tape, config, arch, trainable=False)
    return _network(tape, config, w, a, X).data


def loss_and_grads(config: SuperNetConfig, arch: ArchParams, omega, X, y, groups=("omega", "alpha")):
    """``(loss, flat omega grad | None, flat outer arch grad | None)``."""
    loss, tape = forward(config, arch, omega, X, y)
    value = float(loss.data)
    if not np.isfinite(value) or not groups:
        return value, None, None
    grads = backward(tape, loss, groups)
    gw = omega_layout(config).flatten(grads["omega"]) if "omega" in grads else None
    ga = ArchParams.layout(config).flatten(grads["alpha"]) if "alpha" in grads else None
    return value, gw, ga


# -- discretization ---------------------------------------------------------


def _argmax_first(values) -> int:
    best = 0
    for k in range(1, len(values)):
        if values[k] > values[best]:
            best = k
    return best


def discretize(arch: ArchParams, config: SuperNetConfig) -> Genotype:
    """Argmax non-None operator per preserved edge.

    Edge preservation: argmax beta combination per node when edge search is
    on; otherwise the ``inputs_per_node`` edges with the largest top non-None
    weight when ``prune_edges``; otherwise every active edge. Ties go to the
    lowest operator index, then the lowest edge index.
    """
    candidates = [k for k, op in enumerate(config.operators) if op != OperatorKind.NONE]
    weights = arch.edge_weights(config)
    cells = []
    for g in range(config.num_groups):
        nodes = []
        for j in config.intermediate_nodes:
            incoming = [k for k in config.incoming(j) if config.is_active(g, config.edges[k])]
            if config.search_edges:
                combos = config.combinations(j)
                chosen = set(combos[_argmax_first(list(arch.beta[j][g]))])
                keep = [k for k in incoming if config.edges[k][0] in chosen]
            elif config.prune_edges and len(incoming) > config.inputs_per_node:
                strength = {k: max(weights[g, k, c] for c in candidates) for k in incoming}
                ranked = sorted(incoming, key=lambda k: (-strength[k], k))
                keep = sorted(ranked[: config.inputs_per_node])
            else:
                keep = incoming
            inputs = []
            for k in keep:
                logits = [arch.alpha[g, k, c] for c in candidates]
                op = config.operators[candidates[_argmax_first(logits)]]
                inputs.append((config.edges[k][0], op))
            nodes.append((j, tuple(inputs)))
        cells.append(tuple(nodes))
    return Genotype(tuple(cells))


def degeneration_metrics(arch: ArchParams, config: SuperNetConfig) -> dict[str, float]:
    """Mean softmax weight of ``none`` over active edges, and the skip-connect share of the genotype."""
    weights = arch.edge_weights(config)
    none_w = []
    if OperatorKind.NONE in config.operators:
        k_none = config.operators.index(OperatorKind.NONE)
        for g in range(config.num_groups):
            for e, edge in enumerate(config.edges):
                if config.is_active(g, edge):
                    none_w.append(weights[g, e, k_none])
    ops = discretize(arch, config).all_ops()
    skip = sum(op == OperatorKind.SKIP_CONNECT for op in ops)
    return {
        "mean_none_weight": float(np.mean(none_w)) if none_w else 0.0,
        "skip_ratio": skip / len(ops) if ops else 0.0,
    }


# -- discrete sub-network ----------------------------------------------------


def discrete_layout(genotype: Genotype, config: SuperNetConfig) -> ParamLayout:
    d = config.feature_dim
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if not config.split_input:
        shapes += [("stem.W", (config.input_dim, d)), ("stem.b", (d,))]
    for c in range(config.num_cells):
        for i, j, op in genotype.edges(config.group_of(c)):
            if op.parametric:
                p = f"{_edge_prefix(c, (i, j))}.{op.label}"
                shapes += [(f"{p}.W", (d, d)), (f"{p}.b", (d,))]
    shapes += [("head.W", (d, config.num_classes)), ("head.b", (config.num_classes,))]
    return ParamLayout(shapes)


def cell_parameter_count(genotype: Genotype, config: SuperNetConfig) -> int:
    layout = discrete_layout(genotype, config)
    return sum(math.prod(s) for n, s in layout.shapes.items() if n.startswith("cell"))


def discrete_network(tape: Tape, genotype: Genotype, config: SuperNetConfig, w: dict, X) -> Tensor:
    states = _input_states(tape, config, w, X)
    for c in range(config.num_cells):
        g = config.group_of(c)
        nodes = {i: s for i, s in enumerate(states[-config.input_nodes :])}
        by_node = dict(genotype.cells[g])
        for j in config.intermediate_nodes:
            acc = None
            for i, op in by_node.get(j, ()):
                y = _apply_op(tape, op, nodes[i], w, _edge_prefix(c, (i, j)))
                if y is None:
                    continue
                acc = y if acc is None else tape.add(acc, y)
            nodes[j] = acc if acc is not None else _zeros(tape, states[-1])
        acc = None
        for j in config.intermediate_nodes:
            acc = nodes[j] if acc is None else tape.add(acc, nodes[j])
        states.append(tape.scale(acc, 1.0 / config.nodes_per_cell))
    return tape.affine(states[-1], w["head.W"], w["head.b"])


def discrete_forward(genotype: Genotype, config: SuperNetConfig, omega, X, y) -> tuple[Tensor, Tape]:
    tape = Tape()
    w = tape.leaves_from_flat(omega, discrete_layout(genotype, config), "omega")
    logits = discrete_network(tape, genotype, config, w, X)
    return tape.softmax_cross_entropy(logits, np.asarray(y)), tape


def discrete_logits(genotype: Genotype, config: SuperNetConfig, omega, X) -> np.ndarray:
    tape = Tape()
    w = {k: tape.constant(v) for k, v in discrete_layout(genotype, config).unflatten(omega).items()}
    return discrete_network(tape, genotype, config, w, X).data
