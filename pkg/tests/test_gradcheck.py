import numpy as np
import pytest

from prvipe.gradcheck import DEFAULT_FLOOR, gradcheck, gradcheck_batch, relative_error
from prvipe.losses import LossConfig, loss_and_grads
from prvipe.model import ModelConfig, init_params


class TestRelativeError:
    def test_floor_applies_to_tiny_gradients(self):
        assert relative_error(1e-9, 2e-9) == pytest.approx(1e-9 / DEFAULT_FLOOR)

    def test_relative_for_large_gradients(self):
        assert relative_error(1.0, 1.01) == pytest.approx(0.01 / 1.01)

    def test_symmetric(self):
        a, n = np.array([0.3, -2.0]), np.array([0.31, -1.9])
        np.testing.assert_array_equal(relative_error(a, n), relative_error(n, a))


class TestGradcheck:
    @pytest.mark.parametrize("mode", ["pr-vipe", "vipe", "l2-vipe"])
    def test_modes(self, mode):
        report = gradcheck(seed=1, mode=mode)
        assert report.passed(1e-4), report.max_rel_error
        assert report.reference_gap < 1e-10

    @pytest.mark.parametrize("kwargs", [{"prob_bounds": "clip"}, {"prob_bounds": "none"},
                                        {"mining_estimator": "full"}])
    def test_loss_variants(self, kwargs):
        report = gradcheck(seed=2, loss_config=LossConfig(samples=4, **kwargs))
        assert report.passed(1e-4), report.max_rel_error

    def test_covers_every_weight(self):
        report = gradcheck(seed=0, width=8, dim=2)
        params = init_params(ModelConfig(width=8, dim=2), np.random.default_rng(0))
        assert set(report.max_rel_error) == set(params.weights)
        assert report.checked == sum(np.size(v) for v in params.weights.values())

    def test_zero_loss_gives_zero_gradients(self):
        params = init_params(ModelConfig(width=8, dim=2), np.random.default_rng(0))
        batch = gradcheck_batch(0)
        cfg = LossConfig(samples=3, w_ratio=0.0, w_positive=0.0, w_prior=0.0)
        terms, grads, _ = loss_and_grads(batch, params, cfg, np.random.default_rng(1))
        assert terms.total == 0.0
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)
