import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from splatdiff.estimators import SplatOptimizer, SplatRenderer
from splatdiff.forward import rasterize
from splatdiff.geometry import OptimizationConfig
from splatdiff.scenes import plane_cloud
from splatdiff.validation import check_cloud, check_image, check_points, check_views

from conftest import front_camera


class TestSplatRenderer:
    def test_params_and_clone(self):
        est = SplatRenderer(shading="normal", cache_k=3)
        assert est.get_params()["cache_k"] == 3
        other = clone(est)
        assert other.get_params() == est.get_params() and other is not est

    def test_transform_matches_rasterize(self):
        cloud = plane_cloud(5, 0.5, sigma=0.08)
        cams = [front_camera(size=16, focal=16), front_camera(size=16, focal=20)]
        out = SplatRenderer().fit(cloud).transform(cams)
        assert out.shape == (2, 16, 16, 3)
        np.testing.assert_array_equal(out[1], rasterize(cloud, cams[1])[0].channels)

    def test_accepts_array(self):
        arr = np.hstack([plane_cloud(3, 0.5).positions, np.tile([0, 0, 1.0], (9, 1))])
        out = SplatRenderer(shading="invdepth").fit(arr).transform([front_camera(size=8)])
        assert out.shape == (1, 8, 8, 1)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            SplatRenderer().transform([front_camera()])

    def test_bad_shading(self):
        with pytest.raises(ValueError):
            SplatRenderer(shading="phong").fit(plane_cloud(2))


class TestSplatOptimizer:
    def test_fit_predict_score(self):
        cfg = OptimizationConfig(cycles=1, t_n=2, t_p=2, views_per_step=1, lr_position=0.01,
                                 lr_normal=50)
        cloud = plane_cloud(5, 0.5, sigma=0.08)
        cam = front_camera(size=16, focal=16)
        target = cloud.with_positions(cloud.positions * 1.1)
        ref = rasterize(target, cam)[0].channels
        est = SplatOptimizer(config=cfg, seed=0).fit(cloud, ([cam], [ref]))
        assert len(est.loss_curve_) == 4
        assert est.predict([cam]).shape == (1, 16, 16, 3)
        assert est.score([cam], [ref]) <= 0
        assert clone(est).get_params()["config"] == cfg

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            SplatOptimizer().predict([front_camera()])

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            SplatOptimizer(mode="sculpt").fit(plane_cloud(2), ([front_camera()], [np.zeros((32, 32, 3))]))


class TestValidation:
    def test_check_points(self):
        assert check_points([]).shape == (0, 3)
        with pytest.raises(ValueError):
            check_points([[0, 0]])
        with pytest.raises(ValueError):
            check_points([[0, 0, np.inf]])
        with pytest.raises(ValueError):
            check_points(np.zeros((0, 3)), allow_empty=False)

    def test_check_cloud(self):
        with pytest.raises(ValueError):
            check_cloud(np.zeros((2, 6)))
        assert len(check_cloud(np.hstack([np.zeros((2, 3)), np.ones((2, 3))]))) == 2

    def test_check_image(self):
        assert check_image(np.zeros((2, 3))).shape == (2, 3, 1)
        with pytest.raises(ValueError):
            check_image(np.full((2, 2, 3), np.nan))

    def test_check_views(self):
        cam = front_camera(size=8)
        with pytest.raises(ValueError):
            check_views([])
        with pytest.raises(TypeError):
            check_views(["camera"])
        with pytest.raises(ValueError, match="mismatch"):
            check_views([cam], [np.zeros((8, 8, 3))] * 2)
        with pytest.raises(ValueError, match="does not match"):
            check_views([cam], [np.zeros((8, 9, 3))])
