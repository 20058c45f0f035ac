import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pointcaps.data import make_dataset, stack
from pointcaps.estimator import PointCapsClassifier
from pointcaps.exceptions import ConfigurationError, InputError


@pytest.fixture(scope="module")
def data():
    x, y = stack(make_dataset(("sphere", "plane"), per_class=6, n=32, seed=0))
    return x, np.array(["sphere", "plane"])[y]


@pytest.fixture(scope="module")
def fitted(data):
    x, y = data
    return PointCapsClassifier(preset="tiny", epochs=4, batch_size=4, lr=1e-2).fit(x, y)


def test_params_round_trip():
    est = PointCapsClassifier(epochs=3, routing_mode="all_dr")
    params = est.get_params()
    assert params["epochs"] == 3 and params["routing_mode"] == "all_dr"
    twin = clone(est).set_params(lr=0.5)
    assert twin.lr == 0.5 and est.lr == 2e-2


def test_outputs(fitted, data):
    x, y = data
    assert list(fitted.classes_) == ["plane", "sphere"]
    assert set(fitted.predict(x)) <= {"plane", "sphere"}
    lengths = fitted.decision_function(x)
    assert lengths.shape == (12, 2) and np.all((lengths >= 0) & (lengths < 1))
    assert fitted.transform(x).shape == (12, fitted.model_.config.digit_dim)
    assert fitted.reconstruct(x).shape == x.shape
    parts = fitted.part_assign(x)
    assert parts.shape == (12, 32) and parts.max() < fitted.model_.config.pca1_caps
    assert 0 <= fitted.score(x, y) <= 1
    assert len(fitted.history_) == 4


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        PointCapsClassifier().predict(data[0])


def test_input_validation(fitted, data):
    x, y = data
    with pytest.raises(InputError):
        fitted.predict(x[:, :16])
    with pytest.raises(ValueError):
        PointCapsClassifier(preset="tiny").fit(x[:, :, 0], y)
    with pytest.raises(ValueError):
        PointCapsClassifier(preset="tiny").fit(x, y[:3])
    with pytest.raises(ConfigurationError):
        PointCapsClassifier(preset="huge").fit(x, y)
