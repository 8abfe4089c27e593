"""Alternating bi-level search, the scalar toy problem, edge search and re-training."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datasets import SyntheticDataset, generate_dataset
from .estimators import (
    Amended,
    EstimatorKind,
    FirstOrder,
    SecondOrderDarts,
    describe,
    estimate_parts,
    parse_estimator,
)
from .problem import (
    TOY_TRAIN_BATCH,
    TOY_VAL_BATCH,
    BilevelState,
    Diverged,
    Evaluation,
    NonFiniteLoss,
    toy_state,
)
from .serialization import canonical_json, csv_text
from .supernet import (
    ArchParams,
    Genotype,
    OperatorKind,
    SuperNetConfig,
    _init_from_layout,
    cell_parameter_count,
    degeneration_metrics,
    discrete_forward,
    discrete_layout,
    discrete_logits,
    discretize,
    init_arch,
    init_omega,
    loss_and_grads,
    predict_logits,
)
from .diffcore import backward

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
TEST_SEED_OFFSET = 0x5EED
TRAJECTORY_HEADER = ("epoch", "none_weight", "skip_ratio", "val_acc", "g1_norm", "g2_norm")

__all__ = [
    "TrainingConfig",
    "SearchConfig",
    "Trajectory",
    "TrajectoryRow",
    "ToyTrajectory",
    "SearchResult",
    "RetrainResult",
    "Adam",
    "toy_run",
    "bilevel_search",
    "edge_search_stage",
    "retrain",
    "train_discrete",
    "head_only_baseline",
    "supernet_loss",
]


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrainingConfig:
    """Network shape and weight-training settings shared by search and re-training."""

    num_cells: int = 2
    nodes_per_cell: int = 2
    feature_dim: int = 4
    omega_lr: float = 0.1
    retrain_steps: int = 300
    prune_edges: bool = True

    def __post_init__(self):
        if self.omega_lr <= 0:
            raise ValueError("omega_lr must be positive")
        if self.retrain_steps < 0:
            raise ValueError("retrain_steps must be non-negative")

    def to_json(self) -> str:
        return canonical_json(dataclasses.asdict(self))


@dataclass(frozen=True)
class SearchConfig:
    estimator: EstimatorKind = field(default_factory=lambda: Amended(0.1))
    epochs: int = 50
    inner_steps: int = 1
    alpha_lr: float = 3e-4
    alpha_optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    seed: int = 0
    dataset: str = "two_gaussians"
    dataset_size: int = 200
    operators: tuple[str, ...] = ("none", "skip_connect", "linear", "nonlinear")
    share_cell_params: bool = True
    input_nodes: int = 2
    split_input: bool = False
    consistency: bool = False
    two_stage: bool = False
    edge_epochs: Optional[int] = None
    log_every: int = 1
    training: TrainingConfig = field(default_factory=TrainingConfig)
    retrain_config: Optional[TrainingConfig] = None

    def __post_init__(self):
        if self.epochs < 0 or self.inner_steps < 1 or self.log_every < 1:
            raise ValueError("epochs >= 0, inner_steps >= 1 and log_every >= 1 are required")
        if self.alpha_lr <= 0:
            raise ValueError("alpha_lr must be positive")
        if self.alpha_optimizer not in ("adam", "sgd"):
            raise ValueError("alpha_optimizer must be 'adam' or 'sgd'")
        if self.dataset_size < 4 or self.dataset_size % 4:
            raise ValueError("dataset_size must be a positive multiple of 4")
        if self.consistency and self.retrain_config is not None and self.retrain_config is not self.training:
            raise ValueError("consistency=True requires retrain_config to be the search TrainingConfig")

    @property
    def retrain_training(self) -> TrainingConfig:
        """The configuration used for re-training; the search one itself under consistency."""
        if self.consistency or self.retrain_config is None:
            return self.training
        return self.retrain_config

    def resolved_estimator(self) -> EstimatorKind:
        # DARTS convention: xi defaults to the omega learning rate
        if isinstance(self.estimator, SecondOrderDarts) and self.estimator.xi is None:
            return SecondOrderDarts(self.training.omega_lr)
        return self.estimator

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["estimator"] = describe(self.estimator)
        d["training"] = dataclasses.asdict(self.training)
        d["retrain_config"] = dataclasses.asdict(self.retrain_training)
        d["operators"] = list(self.operators)
        d["adam_betas"] = list(self.adam_betas)
        return d


def supernet_config(config: SearchConfig, data: SyntheticDataset, training: Optional[TrainingConfig] = None, **overrides) -> SuperNetConfig:
    training = training or config.training
    kwargs = dict(
        num_cells=training.num_cells,
        nodes_per_cell=training.nodes_per_cell,
        feature_dim=training.feature_dim,
        input_dim=data.points.shape[1],
        num_classes=data.num_classes,
        share_cell_params=config.share_cell_params,
        operators=tuple(OperatorKind.parse(o) for o in config.operators),
        input_nodes=config.input_nodes,
        prune_edges=training.prune_edges,
        split_input=config.split_input,
    )
    kwargs.update(overrides)
    return SuperNetConfig(**kwargs)


# -- records ------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryRow:
    epoch: int
    none_weight: float
    skip_ratio: float
    val_acc: float
    g1_norm: float
    g2_norm: float
    alpha_hash: str = ""


@dataclass
class Trajectory:
    rows: list[TrajectoryRow] = field(default_factory=list)

    def append(self, row: TrajectoryRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, k) -> TrajectoryRow:
        return self.rows[k]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        return csv_text(TRAJECTORY_HEADER, ([getattr(r, h) for h in TRAJECTORY_HEADER] for r in self.rows))


@dataclass
class ToyTrajectory:
    omega: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    converged: bool = False

    def to_csv(self) -> str:
        return csv_text(("step", "omega", "alpha", "val_loss"),
                        ([t, w, a, l] for t, (w, a, l) in enumerate(zip(self.omega, self.alpha, self.val_loss))))


@dataclass
class SearchResult:
    arch: ArchParams
    genotype: Genotype
    trajectory: Trajectory
    omega: np.ndarray
    network: SuperNetConfig
    edge_selection: Optional[dict] = None


@dataclass
class RetrainResult:
    val_accuracy: float
    loss_curve: list[float]
    cell_parameters: int = 0


# -- optimizers -----------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, lr: float, betas=(0.5, 0.999), weight_decay: float = 0.0, eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = grad + self.weight_decay * params
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * (grad + self.weight_decay * params)


def _alpha_optimizer(config: SearchConfig):
    if config.alpha_optimizer == "adam":
        return Adam(config.alpha_lr, config.adam_betas, config.alpha_weight_decay)
    return SGD(config.alpha_lr, config.alpha_weight_decay)


# -- scalar toy -------------------------------------------------------------------


def toy_run(
    estimator: EstimatorKind,
    steps: int = 400,
    alpha_lr: float = 0.05,
    init: float = 0.5,
    tol: float = 1e-3,
) -> ToyTrajectory:
    """Toy bi-level problem ``L(w, a; x) = (w x - a)^2`` with x_train=1, x_val=2.

    Each step sets omega to its exact inner optimum (omega = alpha) and takes
    one gradient step on alpha with ``estimator``. Raises :class:`Diverged`
    (carrying the partial trajectory) once ``|alpha| > 1e12``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    traj = ToyTrajectory()
    alpha = float(init)
    for step in range(steps + 1):
        omega = alpha  # closed-form inner solve
        traj.omega.append(omega)
        traj.alpha.append(alpha)
        traj.val_loss.append((2.0 * omega - alpha) ** 2)
        if step == steps:
            break
        g1, g2 = estimate_parts(estimator, toy_state(alpha, omega), TOY_TRAIN_BATCH, TOY_VAL_BATCH)
        alpha = alpha - alpha_lr * float((g1 + g2)[0])
        if not np.isfinite(alpha) or abs(alpha) > DIVERGENCE_LIMIT:
            traj.converged = False
            raise Diverged(step + 1, alpha, traj)
    traj.converged = abs(traj.alpha[-1]) < tol
    return traj


# -- super-network search ----------------------------------------------------------


def supernet_loss(config: SuperNetConfig, template: ArchParams):
    """:data:`LossFn` over (flat omega, flat outer arch vector) with batch ``(X, y)``."""

    def fn(omega, alpha, batch, groups=frozenset({"omega", "alpha"})):
        arch = template.with_vector(config, alpha)
        X, y = batch
        value, gw, ga = loss_and_grads(config, arch, omega, X, y, tuple(sorted(groups)))
        return Evaluation(value, gw, ga)

    return fn


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == y))


def _check_loss(value: float, step: int) -> None:
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise Diverged(step, value)


def _run_search(net: SuperNetConfig, config: SearchConfig, epochs: int, data: SyntheticDataset, seed: int) -> SearchResult:
    rng = np.random.default_rng(seed)
    omega = init_omega(net, rng)
    template = init_arch(net, rng)
    alpha = template.to_vector(net)
    (Xtr, ytr), (Xva, yva) = data.split()
    train_batch, val_batch = (Xtr, ytr), (Xva, yva)
    loss = supernet_loss(net, template)
    opt = _alpha_optimizer(config)
    kind = config.resolved_estimator()
    lr = config.training.omega_lr
    traj = Trajectory()

    for epoch in range(1, epochs + 1):
        arch = template.with_vector(net, alpha)
        for _ in range(config.inner_steps):
            value, gw, _ = loss_and_grads(net, arch, omega, Xtr, ytr, ("omega",))
            _check_loss(value, epoch)
            omega = omega - lr * gw
        state = BilevelState(omega, alpha, loss, loss)
        try:
            g1, g2 = estimate_parts(kind, state, train_batch, val_batch)
        except NonFiniteLoss as exc:
            raise Diverged(epoch) from exc
        grad = g1 if isinstance(kind, FirstOrder) or (isinstance(kind, Amended) and kind.eta == 0) else g1 + g2
        if not np.all(np.isfinite(grad)):
            raise Diverged(epoch)
        alpha = opt.step(alpha, grad)
        if epoch % config.log_every == 0 or epoch == epochs:
            arch = template.with_vector(net, alpha)
            metrics = degeneration_metrics(arch, net)
            acc = _accuracy(predict_logits(net, arch, omega, Xva), yva)
            traj.append(TrajectoryRow(
                epoch, metrics["mean_none_weight"], metrics["skip_ratio"], acc,
                float(np.linalg.norm(g1)), float(np.linalg.norm(g2)), arch.fingerprint(),
            ))
            logger.debug("epoch %d none=%.4f skip=%.3f acc=%.3f", epoch, metrics["mean_none_weight"],
                         metrics["skip_ratio"], acc)

    arch = template.with_vector(net, alpha)
    return SearchResult(arch, discretize(arch, net), traj, omega, net)


def _dataset(config: SearchConfig) -> SyntheticDataset:
    return generate_dataset(config.dataset, config.seed, config.dataset_size)


def edge_search_stage(config: SearchConfig, data: Optional[SyntheticDataset] = None) -> dict:
    """Stage 1 of two-stage search: optimize beta with operators frozen to an equal mixture.

    Returns ``{"combinations": {group: {node: (i1, i2, ...)}}, "active_edges": ...}``.
    """
    data = data or _dataset(config)
    net = supernet_config(config, data, search_edges=True, search_ops=False, prune_edges=False)
    epochs = config.epochs if config.edge_epochs is None else config.edge_epochs
    if all(len(net.combinations(j)) == 1 for j in net.intermediate_nodes):
        epochs = 0  # nothing to choose
    result = _run_search(net, config, epochs, data, config.seed)
    combos: dict[int, dict[int, tuple[int, ...]]] = {}
    active = []
    for g, cell in enumerate(result.genotype.cells):
        combos[g] = {j: tuple(i for i, _ in inputs) for j, inputs in cell}
        active.append(tuple((i, j) for j, inputs in cell for i, _ in inputs))
    return {"combinations": combos, "active_edges": tuple(active), "trajectory": result.trajectory}


def bilevel_search(config: SearchConfig, data: Optional[SyntheticDataset] = None) -> SearchResult:
    """Alternate omega SGD steps (train half) with one alpha update per epoch (val half)."""
    data = data or _dataset(config)
    if config.two_stage:
        selection = edge_search_stage(config, data)
        # stage 2 restarts from scratch on the preserved edges
        net = supernet_config(config, data, active_edges=selection["active_edges"], prune_edges=False)
        result = _run_search(net, config, config.epochs, data, config.seed + 1)
        result.edge_selection = selection
        return result
    return _run_search(supernet_config(config, data), config, config.epochs, data, config.seed)


# -- re-training -------------------------------------------------------------------------


def retrain(
    genotype: Genotype,
    training: TrainingConfig,
    seed: int,
    config: Optional[SearchConfig] = None,
    data: Optional[SyntheticDataset] = None,
) -> RetrainResult:
    """Train the discrete sub-network from scratch on the full search data.

    Accuracy is measured on a fresh held-out set from the same generator
    (seed offset by ``TEST_SEED_OFFSET``).
    """
    config = config or SearchConfig(training=training)
    data = data or _dataset(config)
    test = generate_dataset(data.generator, data.seed + TEST_SEED_OFFSET, len(data))
    net = supernet_config(config, data, training=training)
    if len(genotype.cells) != net.num_groups:
        raise ValueError("genotype does not match the network's cell groups")
    for op in genotype.all_ops():
        if op == OperatorKind.NONE:
            raise ValueError("genotype contains the none operator")
    omega, curve = train_discrete(genotype, net, training, seed, data.points, data.labels)
    acc = _accuracy(discrete_logits(genotype, net, omega, test.points), test.labels)
    return RetrainResult(acc, curve, cell_parameter_count(genotype, net))


def train_discrete(genotype: Genotype, net: SuperNetConfig, training: TrainingConfig, seed: int, X, y):
    """Full-batch gradient descent on a fresh sub-network; returns ``(omega, loss curve)``."""
    layout = discrete_layout(genotype, net)
    omega = _init_from_layout(layout, np.random.default_rng(seed))
    curve = []
    for step in range(training.retrain_steps):
        loss, tape = discrete_forward(genotype, net, omega, X, y)
        value = float(loss.data)
        _check_loss(value, step)
        curve.append(value)
        grads = backward(tape, loss, ("omega",))["omega"]
        omega = omega - training.omega_lr * layout.flatten(grads)
    return omega, curve


def head_only_baseline(training: TrainingConfig, seed: int, data: SyntheticDataset) -> float:
    """Held-out accuracy of a single affine classifier trained like :func:`retrain`."""
    from .diffcore import ParamLayout, Tape

    test = generate_dataset(data.generator, data.seed + TEST_SEED_OFFSET, len(data))
    d, c = data.points.shape[1], data.num_classes
    layout = ParamLayout([("head.W", (d, c)), ("head.b", (c,))])
    omega = _init_from_layout(layout, np.random.default_rng(seed))
    for step in range(training.retrain_steps):
        tape = Tape()
        w = tape.leaves_from_flat(omega, layout, "omega")
        loss = tape.softmax_cross_entropy(tape.affine(tape.constant(data.points), w["head.W"], w["head.b"]), data.labels)
        _check_loss(float(loss.data), step)
        omega = omega - training.omega_lr * layout.flatten(backward(tape, loss, ("omega",))["omega"])
    W, b = layout.unflatten(omega).values()
    return _accuracy(test.points @ W + b, test.labels)
