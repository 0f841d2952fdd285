import numpy as np
import pytest

from splatdiff.geometry import EmptyCloudError
from splatdiff.losses import chamfer_distance, hausdorff_distance, smape, total_loss

from oracles import chamfer_oracle, hausdorff_oracle, smape_oracle


class TestSmape:
    def test_one_versus_zero_single_pixel(self):
        loss, _ = smape(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
        assert abs(loss - 1 / (1 + 1e-5)) < 1e-12
        assert abs(loss - 0.99999) < 1e-9

    def test_identical_images(self):
        img = np.random.default_rng(0).random((5, 4, 3))
        loss, grad = smape(img, img)
        assert loss == 0.0
        assert np.all(grad == 0)

    def test_matches_oracle(self, rng):
        a, b = rng.normal(size=(6, 5, 3)), rng.random((6, 5, 3))
        assert smape(a, b)[0] == pytest.approx(smape_oracle(a, b), rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        a, b = rng.uniform(0.1, 1, (4, 3, 3)), rng.uniform(0.1, 1, (4, 3, 3))
        _, grad = smape(a, b)
        h = 1e-7
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += h
            am[idx] -= h
            fd[idx] = (smape(ap, b)[0] - smape(am, b)[0]) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)

    def test_bounded_and_symmetric(self, rng):
        a, b = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
        la, lb = smape(a, b)[0], smape(b, a)[0]
        assert la == pytest.approx(lb)
        assert 0 <= la <= 3  # at most one per channel

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smape(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_grayscale_input(self):
        loss, grad = smape(np.ones((2, 2)), np.zeros((2, 2)))
        assert grad.shape == (2, 2, 1)
        assert loss == pytest.approx(1 / (1 + 1e-5))


class TestTotalLoss:
    def test_composition_identity(self):
        report = total_loss([0.25, 0.5, 0.125], 0.3, 7.0, gamma_p=0.02, gamma_r=0.05)
        assert abs(report.total - (0.875 + 0.02 * 0.3 + 0.05 * 7.0)) <= 1e-12
        assert report.per_view_image_losses == [0.25, 0.5, 0.125]

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            total_loss([1.0], 0.0, 0.0, gamma_p=-1)


class TestPointMetrics:
    @pytest.mark.parametrize("n,m", [(1, 1), (7, 13), (200, 150)])
    def test_match_brute_force(self, rng, n, m):
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        assert chamfer_distance(a, b) == chamfer_oracle(a, b)
        assert hausdorff_distance(a, b) == hausdorff_oracle(a, b)

    def test_identical_sets(self, rng):
        a = rng.normal(size=(30, 3))
        assert chamfer_distance(a, a) == 0.0
        assert hausdorff_distance(a, a) == 0.0

    def test_known_values(self):
        a = np.array([[0.0, 0, 0]])
        b = np.array([[3.0, 4, 0], [0.0, 0, 1]])
        # a->b: nearest squared 1; b->a: mean of 25 and 1
        assert chamfer_distance(a, b) == pytest.approx(0.5 * (1 + 13))
        assert hausdorff_distance(a, b) == pytest.approx(5.0)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloudError):
            chamfer_distance(np.zeros((0, 3)), np.ones((2, 3)))
        with pytest.raises(EmptyCloudError):
            hausdorff_distance(np.ones((2, 3)), np.zeros((0, 3)))
