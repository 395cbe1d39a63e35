import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rcnkit.bench import nms_thin
from rcnkit.estimator import ContourThinner, RefineContourNet, check_images, check_labels
from rcnkit.forge import synth_images


@pytest.fixture(scope="module")
def data():
    samples = synth_images(3, seed=2)
    return np.stack([s.image for s in samples]), [s.label.pixels for s in samples]


class TestValidation:
    def test_gray_and_float(self):
        out = check_images([np.zeros((4, 5)), np.ones((4, 5, 3), np.float32)])
        assert out[0].shape == (4, 5, 3) and out[0].dtype == np.uint8
        assert out[1].max() == 255

    def test_rejects(self):
        with pytest.raises(ValueError):
            check_images([])
        with pytest.raises(ValueError):
            check_images([np.full((4, 4), 2.0)])
        with pytest.raises(ValueError):
            check_images(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            check_images([np.zeros((4, 4, 2))])

    def test_labels(self):
        imgs = check_images([np.zeros((4, 4))] * 2)
        out = check_labels([np.eye(4), [np.eye(4), np.ones((4, 4))]], imgs)
        assert [len(x) for x in out] == [1, 2]
        with pytest.raises(ValueError):
            check_labels([np.eye(4)], imgs)
        with pytest.raises(ValueError):
            check_labels([np.eye(3), np.eye(4)], imgs)
        with pytest.raises(ValueError):
            check_labels([[], np.eye(4)], imgs)


class TestRefineContourNet:
    def test_params_round_trip(self):
        est = RefineContourNet(epochs=3, beta=5.0)
        params = est.get_params()
        assert params["epochs"] == 3 and params["beta"] == 5.0
        assert clone(est).get_params() == params
        assert est.set_params(lr=0.1).lr == 0.1

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            RefineContourNet().predict_proba(data[0])

    def test_fit_predict(self, data):
        X, y = data
        est = RefineContourNet(epochs=2, images_per_epoch=4, batch_size=2, random_state=1).fit(X, y)
        assert len(est.history_) == 2
        probs = est.predict_proba(X)
        assert probs.shape == X.shape[:3]
        assert ((probs >= 0) & (probs <= 1)).all()
        binary = est.predict(X)
        assert set(np.unique(binary)) <= {0, 1}
        assert 0.0 <= est.score(X, y) <= 1.0

    def test_seeded(self, data):
        X, y = data
        a = RefineContourNet(epochs=1, images_per_epoch=2, batch_size=2, random_state=4).fit(X, y)
        b = RefineContourNet(epochs=1, images_per_epoch=2, batch_size=2, random_state=4).fit(X, y)
        assert a.predict_proba(X[:1]).tobytes() == b.predict_proba(X[:1]).tobytes()

    def test_warm_start_continues(self, data):
        X, y = data
        est = RefineContourNet(epochs=1, images_per_epoch=2, batch_size=2, warm_start=True).fit(X, y)
        store = est.store_
        est.fit(X, y)
        assert est.store_ is store

    def test_bad_schedule(self, data):
        from rcnkit.config import ConfigError

        with pytest.raises(ConfigError):
            RefineContourNet(images_per_epoch=0).fit(*data)


class TestContourThinner:
    def test_matches_nms(self):
        rng = np.random.default_rng(0)
        maps = rng.random((2, 10, 10))
        out = ContourThinner().fit_transform(maps)
        for m, o in zip(maps, out):
            np.testing.assert_array_equal(o, nms_thin(m))

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ContourThinner().transform(np.full((3, 3), np.nan))
        with pytest.raises(ValueError):
            ContourThinner().transform(np.zeros(4))
