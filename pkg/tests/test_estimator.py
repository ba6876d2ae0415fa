import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mupscale import MupMLPClassifier, MupMLPRegressor
from mupscale.exceptions import InvalidParameterError


@pytest.fixture
def reg_data():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 3))
    return X, np.sin(X[:, 0]) + 0.5 * X[:, 1]


def test_regressor_learns(reg_data):
    X, y = reg_data
    est = MupMLPRegressor(hidden=(16, 16), lr=0.02, max_iter=300, batch_size=16).fit(X, y)
    assert est.predict(X).shape == (64,)
    assert est.loss_curve_[-1] < 0.5 * est.loss_curve_[0]
    assert est.score(X, y) > 0.5 and est.n_iter_ == 300


def test_multi_output(reg_data):
    X, y = reg_data
    est = MupMLPRegressor(hidden=8, max_iter=5).fit(X, np.c_[y, -y])
    assert est.predict(X).shape == (64, 2)


def test_deterministic(reg_data):
    X, y = reg_data
    a = MupMLPRegressor(hidden=8, max_iter=20, random_state=3).fit(X, y).predict(X)
    b = MupMLPRegressor(hidden=8, max_iter=20, random_state=3).fit(X, y).predict(X)
    assert a.tobytes() == b.tobytes()


def test_params_and_clone():
    est = MupMLPRegressor(hidden=(4,), lr=0.3, optimizer="sgd_momentum")
    assert est.get_params()["lr"] == 0.3
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert est.set_params(lr=0.1).lr == 0.1


def test_partial_fit_continues(reg_data):
    X, y = reg_data
    part = MupMLPRegressor(hidden=8, max_iter=4, batch_size=16).fit(X, y)
    part.partial_fit(X, y, steps=6)
    assert part.n_iter_ == 10 and len(part.loss_curve_) == 10


def test_upscale_equivalent(reg_data):
    X, y = reg_data
    est = MupMLPRegressor(hidden=(8, 8), optimizer="adam", lr=0.01, max_iter=20, batch_size=16).fit(X, y)
    wide = est.upscale(k=2)
    assert wide.hidden == (16, 16) and wide.n_iter_ == 20
    assert np.max(np.abs(wide.predict(X) - est.predict(X))) <= 1e-12
    est.partial_fit(X, y, steps=5)
    wide.partial_fit(X, y, steps=5)
    assert np.max(np.abs(wide.predict(X) - est.predict(X))) <= 1e-8
    noisy = est.upscale(k=2, noise_std=0.5, random_state=1)
    assert np.max(np.abs(noisy.predict(X) - est.predict(X))) > 1e-6


def test_classifier():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((90, 2))
    y = np.array(["a", "b", "c"])[(X[:, 0] > 0).astype(int) + (X[:, 1] > 0.5).astype(int)]
    clf = MupMLPClassifier(hidden=16, lr=0.02, max_iter=300, batch_size=30).fit(X, y)
    P = clf.predict_proba(X)
    assert P.shape == (90, 3) and np.allclose(P.sum(axis=1), 1.0)
    assert list(clf.classes_) == ["a", "b", "c"] and clf.score(X, y) > 0.8
    assert clf.upscale(k=2).classes_.tolist() == ["a", "b", "c"]


def test_errors(reg_data):
    X, y = reg_data
    with pytest.raises(NotFittedError):
        MupMLPRegressor().predict(X)
    with pytest.raises(InvalidParameterError):
        MupMLPRegressor(hidden=(0,)).fit(X, y)
    with pytest.raises(InvalidParameterError):
        MupMLPRegressor(lr=-1.0).fit(X, y)
    est = MupMLPRegressor(hidden=4, max_iter=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])
    clf = MupMLPClassifier(hidden=4, max_iter=1).fit(X, (y > 0).astype(int))
    with pytest.raises(InvalidParameterError):
        clf.partial_fit(X[:2], [0, 5])


def test_partial_fit_classes():
    X = np.random.default_rng(0).standard_normal((6, 2))
    clf = MupMLPClassifier(hidden=4).partial_fit(X, [0, 1, 0, 1, 0, 1], classes=[0, 1, 2])
    assert clf.classes_.tolist() == [0, 1, 2] and clf.predict_proba(X).shape == (6, 3)
    assert MupMLPClassifier(hidden=4, max_iter=1).fit(X, [0, 1] * 3).classes_.tolist() == [0, 1]


def test_sklearn_compatible():
    from sklearn.utils.estimator_checks import check_estimator

    for est in (MupMLPRegressor(), MupMLPClassifier()):
        check_estimator(est)
