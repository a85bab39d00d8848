import logging
import math

import numpy as np
import pytest
import torch

from sgplvm.core.config import ModelConfig, TrainConfig
from sgplvm.core.exceptions import ConfigError, InputError, ModelStateError, NonFiniteBoundError, ShapeError
from sgplvm.models.grid import ObservationGrid
from sgplvm.services.training_service import TRACE_COLUMNS, training_service
from sgplvm.utils.helpers import destandardize
from tests.factories import random_grid, random_model


class TestObservationGrid:
    def test_from_images_orders_latent_major(self):
        images = torch.arange(2 * 3 * 2 * 1, dtype=torch.float64).reshape(2, 3, 2, 1)
        grid = ObservationGrid.from_images(images)
        assert grid.spatial_shape == (3, 2)
        assert grid.n_xi == 2 and grid.n_s == 6
        np.testing.assert_array_equal(grid.y[:, 0], np.arange(12))
        np.testing.assert_array_equal(grid.wide()[1], np.arange(6, 12))

    def test_row_count_checked(self):
        with pytest.raises(ShapeError):
            ObservationGrid(torch.zeros(7, 1), (torch.zeros(3, 1),), 2)

    def test_missing_training_values_rejected(self):
        y = torch.zeros(6, 1, dtype=torch.float64)
        y[2] = float("nan")
        with pytest.raises(InputError):
            ObservationGrid(y, (torch.zeros(3, 1),), 2)

    def test_timestamps_must_increase(self):
        with pytest.raises(InputError):
            ObservationGrid(torch.zeros(6, 1), (torch.zeros(3, 1),), 2, torch.tensor([1.0, 1.0]))


class TestModelContainer:
    def test_pack_unpack_round_trip(self, model):
        theta = model.pack()
        model.unpack(theta + 0.01)
        np.testing.assert_allclose(model.pack(), theta + 0.01, rtol=1e-15)
        model.unpack(theta)
        np.testing.assert_array_equal(model.pack(), theta)

    def test_unpack_wrong_length(self, model):
        with pytest.raises(ShapeError):
            model.unpack(torch.zeros(model.pack().numel() + 1, dtype=torch.float64))

    def test_tied_inducing_inputs_are_training_coordinates(self):
        model = random_model(seed=1, m_s=[2, None])
        assert model.m_s == (2, 4)
        assert model.z_s[1] is model.grid.xs_factors[1]
        assert all(not p.requires_grad for p in model.z_s_free)

    def test_untrained_model_refuses_prediction_state(self):
        model = random_model(seed=1, trained=False)
        with pytest.raises(ModelStateError):
            model.require_trained()

    def test_latent_kernel_must_be_rbf(self, model):
        from sgplvm.models.kernel import KernelSpec
        from sgplvm.models.sgplvm import SgplvmModel

        with pytest.raises(InputError):
            SgplvmModel(
                model.grid, KernelSpec("matern32", 1.0, [1.0], 2), list(model.spatial_kernels),
                model.q_latent, model.z_xi.detach(), [None, None], 10.0,
            )


class TestInitialize:
    def test_shapes_and_standardization(self, model_cfg, train_cfg):
        data = random_grid(seed=2, n_xi=8, d_y=2)
        data = data.with_y(3.0 * data.y + 5.0)
        model = training_service.initialize(data, model_cfg, train_cfg)
        assert model.q_latent.mu.shape == (8, 2)
        assert model.z_xi.shape == (4, 2)
        assert model.m_s == (3, 4)
        np.testing.assert_allclose(model.grid.y.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(model.grid.y.std(0, unbiased=False), 1.0, rtol=1e-12)
        np.testing.assert_allclose(destandardize(model.grid.y, model.y_mean, model.y_scale), data.y, rtol=1e-12)
        assert not model.is_trained
        assert math.isclose(float(model.beta), model_cfg.beta_init, rel_tol=1e-12)

    def test_pca_init_first_component_has_unit_spread(self, model_cfg, train_cfg):
        model = training_service.initialize(random_grid(seed=3, n_xi=8), model_cfg, train_cfg)
        mu = model.q_latent.mu.detach()
        np.testing.assert_allclose(float(mu[:, 0].std(unbiased=False)), 1.0, rtol=1e-10)

    def test_random_init_is_seeded(self, model_cfg):
        cfg = TrainConfig(init="random", seed=4)
        data = random_grid(seed=4, n_xi=8)
        a = training_service.initialize(data, model_cfg, cfg)
        b = training_service.initialize(data, model_cfg, cfg)
        np.testing.assert_array_equal(a.q_latent.mu.detach(), b.q_latent.mu.detach())
        np.testing.assert_array_equal(a.z_xi.detach(), b.z_xi.detach())

    def test_all_points_as_inducing(self, train_cfg):
        data = random_grid(seed=5, n_xi=6)
        model = training_service.initialize(data, ModelConfig(d_xi=2, m_xi=6), train_cfg)
        np.testing.assert_allclose(model.z_xi.detach(), model.q_latent.mu.detach())

    def test_dynamical_init(self, train_cfg):
        data = random_grid(seed=6, n_xi=7, timestamps=True)
        model = training_service.initialize(data, ModelConfig(d_xi=2, m_xi=4, prior="dynamical"), train_cfg)
        assert model.q_latent.is_dynamical
        assert model.temporal is not None
        with torch.no_grad():
            assert math.isfinite(float(model.elbo()))

    @pytest.mark.parametrize(
        "cfg,data_kwargs",
        [
            (ModelConfig(d_xi=9), dict(n_xi=6)),
            (ModelConfig(d_xi=2, m_xi=7), dict(n_xi=6)),
            (ModelConfig(d_xi=2, m_xi=3, m_s=(2,)), dict(n_xi=6)),
            (ModelConfig(d_xi=2, m_xi=3, m_s=(5, 2)), dict(n_xi=6)),
            (ModelConfig(d_xi=2, m_xi=3, m_s=(2, 2), spatial_family="white"), dict(n_xi=6)),
            (ModelConfig(d_xi=2, m_xi=3, prior="dynamical"), dict(n_xi=6)),
        ],
    )
    def test_config_errors(self, cfg, data_kwargs, train_cfg):
        with pytest.raises(ConfigError):
            training_service.initialize(random_grid(seed=7, **data_kwargs), cfg, train_cfg)


class TestTrain:
    def test_bound_improves_and_trace_is_complete(self, model_cfg, train_cfg):
        model = training_service.initialize(random_grid(seed=8, n_xi=8), model_cfg, train_cfg)
        result = training_service.train(model, train_cfg)
        assert model.is_trained
        assert result.final_bound > result.initial_bound
        assert result.trace[0]["iter"] == 0
        assert all(set(row) == set(TRACE_COLUMNS) for row in result.trace)
        assert [row["iter"] for row in result.trace] == list(range(len(result.trace)))
        with torch.no_grad():
            np.testing.assert_allclose(float(model.elbo()), result.final_bound, rtol=1e-10)

    def test_beta_fixed_during_warm_up(self, model_cfg, train_cfg):
        model = training_service.initialize(random_grid(seed=9, n_xi=8), model_cfg, train_cfg)
        result = training_service.train(model, train_cfg)
        warm = [row["beta"] for row in result.trace[: train_cfg.fixed_beta_iters + 1]]
        np.testing.assert_allclose(warm, model_cfg.beta_init, rtol=1e-12)

    def test_zero_iterations_marks_trained(self, model_cfg):
        model = training_service.initialize(random_grid(seed=10, n_xi=6), model_cfg, TrainConfig())
        theta = model.pack()
        result = training_service.train(model, TrainConfig(max_iters=0))
        assert model.is_trained
        assert len(result.trace) == 1
        np.testing.assert_array_equal(model.pack(), theta)

    def test_adam_moments_and_resume(self, model_cfg):
        cfg = TrainConfig(optimizer="adam", max_iters=6, fixed_beta_iters=0, learning_rate=0.01)
        model = training_service.initialize(random_grid(seed=11, n_xi=6), model_cfg, cfg)
        first = training_service.train(model, cfg)
        assert first.moments is not None
        assert first.moments.exp_avg.numel() == model.pack().numel()
        assert first.moments.step == 6

        second = training_service.train(model, cfg, resume=first.moments)
        assert second.moments.step == 12
        assert second.final_bound >= second.initial_bound

    def test_lbfgs_has_no_moments(self, model_cfg, train_cfg):
        model = training_service.initialize(random_grid(seed=12, n_xi=6), model_cfg, train_cfg)
        assert training_service.train(model, TrainConfig(max_iters=2)).moments is None

    @staticmethod
    def _failing_elbo(model, fail_calls):
        elbo, calls = model.elbo, [0]

        def wrapped():
            calls[0] += 1
            if calls[0] in fail_calls:
                raise NonFiniteBoundError("data_fit is not finite")
            return elbo()

        return wrapped

    def test_failed_step_is_rejected_and_training_continues(self, model_cfg, train_cfg, monkeypatch, caplog):
        model = training_service.initialize(random_grid(seed=13, n_xi=6), model_cfg, train_cfg)
        # call 1 is the initial bound, call 2 the first closure evaluation
        monkeypatch.setattr(model, "elbo", self._failing_elbo(model, {2}))
        with caplog.at_level(logging.WARNING, logger="sgplvm.services.training_service"):
            result = training_service.train(model, train_cfg)
        assert model.is_trained
        assert "Rejected step 1" in caplog.text
        assert 1 not in [row["iter"] for row in result.trace]
        assert len(result.trace) > 1
        assert result.final_bound >= result.initial_bound

    def test_repeated_failures_abort_with_best_state(self, model_cfg, train_cfg, monkeypatch):
        model = training_service.initialize(random_grid(seed=14, n_xi=6), model_cfg, train_cfg)
        theta = model.pack()
        monkeypatch.setattr(model, "elbo", self._failing_elbo(model, set(range(2, 100))))
        with pytest.raises(NonFiniteBoundError, match="3 rejected steps") as info:
            training_service.train(model, train_cfg)
        assert len(info.value.trace) == 1
        np.testing.assert_array_equal(model.pack(), theta)
