import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fovit.data import SyntheticSpec, generate_synthetic
from fovit.estimators import FixationCascade, FoveatedViTClassifier, UnfoveatedViTClassifier, check_images
from fovit.vit import save_model

SMALL = dict(dim=16, heads=2, depth=1, epochs=1, batch_size=20, lr_init=3e-3, lr_min=3e-4)


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(SyntheticSpec(n_classes=4, n_train=40, n_val=12))
    names = np.array(["ant", "bee", "cat", "dog"])
    return ds.train_images, names[ds.train_labels], ds.val_images, names[ds.val_labels]


@pytest.fixture(scope="module")
def fitted(data):
    X, y, _, _ = data
    fov = FoveatedViTClassifier(**SMALL).fit(X, y)
    unf = UnfoveatedViTClassifier(**SMALL).fit(X, y)
    return fov, unf


def test_params_and_clone():
    est = FoveatedViTClassifier(dim=24, n_fixations=3, policy="random")
    params = est.get_params()
    assert params["dim"] == 24 and params["n_fixations"] == 3 and params["policy"] == "random"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert clone(UnfoveatedViTClassifier(depth=3)).get_params()["depth"] == 3


def test_fit_predict_shapes_and_labels(data, fitted):
    _, _, Xv, yv = data
    fov, unf = fitted
    for est in (fov, unf):
        assert list(est.classes_) == ["ant", "bee", "cat", "dog"]
        proba = est.predict_proba(Xv)
        assert proba.shape == (12, 4)
        np.testing.assert_allclose(proba.sum(1), 1.0, rtol=1e-12)
        pred = est.predict(Xv)
        assert set(pred) <= set(est.classes_)
        np.testing.assert_array_equal(pred, est.classes_[proba.argmax(1)])
        assert 0.0 <= est.score(Xv, yv) <= 1.0


def test_fit_is_reproducible(data, fitted):
    X, y, Xv, _ = data
    again = FoveatedViTClassifier(**SMALL).fit(X, y)
    np.testing.assert_array_equal(again.predict_proba(Xv), fitted[0].predict_proba(Xv))


def test_staged_probabilities(data, fitted):
    _, _, Xv, _ = data
    stages = list(fitted[0].staged_predict_proba(Xv))
    assert len(stages) == 5
    np.testing.assert_array_equal(stages[-1], fitted[0].predict_proba(Xv))


def test_not_fitted_and_bad_input(data):
    _, _, Xv, _ = data
    with pytest.raises(NotFittedError):
        FoveatedViTClassifier().predict(Xv)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 64, 64, 3), np.uint8), 112)
    with pytest.raises(ValueError):
        check_images(np.full((1, 112, 112, 3), 2.0))
    with pytest.raises(ValueError):
        check_images(np.zeros((0, 112, 112, 3), np.uint8))
    with pytest.raises(ValueError):
        FoveatedViTClassifier(**SMALL).fit(Xv, ["a"] * 3)


def test_checkpoint_round_trip(tmp_path, data, fitted):
    _, _, Xv, _ = data
    fov = fitted[0]
    save_model(fov.model_, tmp_path / "f.ckpt")
    back = FoveatedViTClassifier.from_checkpoint(tmp_path / "f.ckpt", classes=fov.classes_)
    np.testing.assert_array_equal(back.predict_proba(Xv), fov.predict_proba(Xv))


def test_cascade(data, fitted):
    X, y, Xv, yv = data
    fov, unf = fitted
    cascade = FixationCascade(fov, unf, threshold=0.3).fit(X, y)
    assert cascade.threshold_ == 0.3
    pred = cascade.predict(Xv)
    assert pred.shape == (12,) and set(pred) <= set(fov.classes_)
    led = cascade.ledger_
    assert led.total == 30 * led.fixations + 197 * led.escalations
    # every image still unclassified after five fixations takes the full-resolution answer
    escalated = cascade.stages_ == 6
    if escalated.any():
        np.testing.assert_array_equal(pred[escalated], unf.predict(Xv[escalated]))
    # threshold above 1: nothing stops early, all images escalate
    everything = FixationCascade(fov, unf, threshold=1.1).fit(X)
    assert (everything.run(Xv).stage == 6).all()
    np.testing.assert_array_equal(everything.predict(Xv), unf.predict(Xv))


def test_cascade_threshold_from_training_data(data, fitted):
    X, y, _, _ = data
    fov, unf = fitted
    try:
        cascade = FixationCascade(fov, unf).fit(X, y)
    except RuntimeError:
        pytest.skip("one-epoch model got nothing right")
    assert 0.0 < cascade.threshold_ <= 1.0
    with pytest.raises(ValueError):
        FixationCascade(fov, unf).fit(X)
