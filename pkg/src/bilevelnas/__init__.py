"""Bi-level differentiable architecture search with amended hypergradients.

Modules: :mod:`~bilevelnas.diffcore` (tape autodiff),
:mod:`~bilevelnas.supernet` (mixed-op network and discretization),
:mod:`~bilevelnas.estimators` (architectural-gradient estimators),
:mod:`~bilevelnas.oracle` (dense ground-truth hypergradients),
:mod:`~bilevelnas.search` (search loop, toy problem, re-training) and
:mod:`~bilevelnas.api` (scikit-learn style wrappers).
"""

__version__ = "0.1.0"

from .api import GenotypeClassifier, SuperNetSearchClassifier
from .estimators import Amended, BruteForce, ExactImplicit, FirstOrder, SecondOrderDarts, estimate_arch_gradient
from .search import SearchConfig, TrainingConfig, bilevel_search, retrain, toy_run
from .supernet import Genotype, OperatorKind, SuperNetConfig, discretize

__all__ = [
    "__version__",
    "Amended",
    "BruteForce",
    "ExactImplicit",
    "FirstOrder",
    "SecondOrderDarts",
    "estimate_arch_gradient",
    "SearchConfig",
    "TrainingConfig",
    "bilevel_search",
    "retrain",
    "toy_run",
    "Genotype",
    "OperatorKind",
    "SuperNetConfig",
    "discretize",
    "GenotypeClassifier",
    "SuperNetSearchClassifier",
]
