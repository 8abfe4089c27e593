import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from bilevelnas import GenotypeClassifier, SuperNetSearchClassifier
from bilevelnas.datasets import generate_dataset
from bilevelnas.supernet import Genotype, OperatorKind


@pytest.fixture(scope="module")
def gaussians():
    d = generate_dataset("two_gaussians", 0, 80)
    labels = np.array(["neg", "pos"])[d.labels]
    return d.points, labels


def _search(**kw):
    return SuperNetSearchClassifier(epochs=5, feature_dim=3, num_cells=1, random_state=0, **kw)


def test_fit_predict_uses_original_labels(gaussians):
    X, y = gaussians
    clf = _search().fit(X, y)
    assert list(clf.classes_) == ["neg", "pos"]
    assert set(clf.predict(X)) <= {"neg", "pos"}
    proba = clf.predict_proba(X)
    assert proba.shape == (len(X), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert isinstance(clf.genotype_, Genotype)
    assert len(clf.trajectory_) == 5
    assert clf.n_features_in_ == 2


def test_fit_is_deterministic(gaussians):
    X, y = gaussians
    a, b = _search().fit(X, y), _search().fit(X, y)
    assert a.decision_function(X).tobytes() == b.decision_function(X).tobytes()
    assert a.genotype_ == b.genotype_


def test_get_params_and_clone():
    clf = _search(eta=0.3)
    params = clf.get_params()
    assert params["eta"] == 0.3 and params["epochs"] == 5
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        _search().predict(np.zeros((2, 2)))
    with pytest.raises(NotFittedError):
        GenotypeClassifier().predict(np.zeros((2, 2)))


def test_single_class_rejected():
    with pytest.raises(ValueError):
        _search().fit(np.zeros((8, 2)), np.zeros(8))


def test_wrong_feature_count_rejected(gaussians):
    X, y = gaussians
    clf = _search().fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((3, 5)))


def test_genotype_classifier_learns_rings():
    d = generate_dataset("concentric_rings", 0, 200)
    nonlin = OperatorKind.NONLINEAR
    genotype = Genotype((((2, ((0, nonlin), (1, nonlin))), (3, ((0, nonlin), (2, nonlin)))),))
    clf = GenotypeClassifier(genotype=genotype, feature_dim=8, omega_lr=0.3, steps=500, random_state=0)
    clf.fit(d.points, d.labels)
    assert clf.score(d.points, d.labels) > 0.9
    assert clf.loss_curve_[-1] < clf.loss_curve_[0]
