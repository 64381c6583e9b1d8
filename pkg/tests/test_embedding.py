"""
Tests for the embedding network, AAM loss and training.
"""

import math

import pytest
import numpy as np

from src.config import NetConfig
from src.errors import ConfigError, DimensionMismatchError, LabelIndexError, TooShortError
from src.model.embedding import (
    Embedding,
    TENSOR_NAMES,
    aam_loss,
    backward,
    embed_all,
    forward,
    gradient_check,
    init_net,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    stats_pool,
    train,
)


@pytest.fixture
def net(small_net_cfg):
    return init_net(3, small_net_cfg, n_classes=4)


def random_features(seed, frames=20, bands=40):
    return np.random.default_rng(seed).normal(0.0, 6.0, size=(frames, bands))


class TestForward:
    """Test the forward pass."""

    def test_unit_norm(self, net):
        e = forward(net, random_features(0))
        assert e.dim == 8
        assert np.linalg.norm(e.vector) == pytest.approx(1.0)

    def test_deterministic_init(self, small_net_cfg):
        a = init_net(5, small_net_cfg, 3)
        b = init_net(5, small_net_cfg, 3)
        for name in TENSOR_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_init_bounds(self, small_net_cfg):
        params = init_net(2, small_net_cfg, n_classes=3)
        fan_in = {
            "conv1_w": small_net_cfg.in_dim * small_net_cfg.conv1_kernel,
            "conv2_w": small_net_cfg.conv1_channels * small_net_cfg.conv2_kernel,
            "proj_w": 2 * small_net_cfg.conv2_channels,
        }
        for name, n in fan_in.items():
            assert np.max(np.abs(getattr(params, name))) <= 1 / math.sqrt(n)
        for name in ("conv1_b", "conv2_b", "proj_b"):
            assert not getattr(params, name).any()

    def test_class_rows_unit_norm(self, net):
        np.testing.assert_allclose(np.linalg.norm(net.class_weights, axis=1), 1.0)

    def test_pool_is_order_invariant(self):
        a = np.random.default_rng(1).normal(size=(10, 3))
        np.testing.assert_allclose(stats_pool(a), stats_pool(a[::-1]))
        np.testing.assert_allclose(stats_pool(a), stats_pool(np.vstack([a, a])))

    def test_wrong_band_count(self, net):
        with pytest.raises(DimensionMismatchError):
            forward(net, random_features(0, bands=30))

    def test_too_few_frames(self, net):
        with pytest.raises(TooShortError):
            forward(net, random_features(0, frames=net.min_frames - 1))

    def test_embed_all_rows(self, net):
        out = embed_all(net, [random_features(i) for i in range(3)])
        assert out.shape == (3, 8)


class TestAamLoss:
    """Test the additive angular margin softmax."""

    def test_margin_raises_loss(self, net):
        e = Embedding(net.class_weights[1].copy())
        plain, _ = aam_loss(e, 1, net.class_weights, 30.0, 0.0)
        margin, _ = aam_loss(e, 1, net.class_weights, 30.0, 0.2)
        assert margin > plain

    def test_target_logit(self, net):
        e = Embedding(net.class_weights[2].copy())
        _, logits = aam_loss(e, 2, net.class_weights, 10.0, 0.3)
        assert logits[2] == pytest.approx(10.0 * math.cos(0.3))

    def test_closed_form(self):
        """No margin, unit scale, aligned with its own row: -log(e / (e + 1))."""
        weights = np.eye(2)
        loss, _ = aam_loss(Embedding(np.array([1.0, 0.0])), 0, weights, 1.0, 0.0)
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1)))
        assert loss == pytest.approx(0.3133, abs=1e-4)

    def test_label_out_of_range(self, net):
        with pytest.raises(LabelIndexError):
            aam_loss(Embedding(net.class_weights[0]), 4, net.class_weights, 30.0, 0.2)

    @pytest.mark.parametrize("scale,margin", [(0.0, 0.2), (30.0, 2.0)])
    def test_bad_hyperparameters(self, net, scale, margin):
        with pytest.raises(ConfigError):
            aam_loss(Embedding(net.class_weights[0]), 0, net.class_weights, scale, margin)


class TestGradients:
    """Test analytic gradients against central differences."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_check(self, small_net_cfg, seed):
        """Every tensor and the input agree with central differences to 1e-4."""
        hyper = NetConfig(conv1_channels=6, conv2_channels=6, embed_dim=8, scale=10.0, margin=0.2)
        params = init_net(seed, hyper, n_classes=3)
        errors = gradient_check(params, random_features(seed, frames=16), seed % 3, hyper,
                                h=1e-5, max_entries=40, seed=seed)
        assert set(errors) == set(TENSOR_NAMES) | {"input"}
        for name, err in errors.items():
            assert err < 1e-4, f"{name}: {err:.2e}"

    def test_backward_shapes(self, net, small_net_cfg):
        grads = backward(net, random_features(4), 1, small_net_cfg)
        for name in TENSOR_NAMES:
            assert grads[name].shape == getattr(net, name).shape


class TestTrain:
    """Test SGD training."""

    def test_loss_decreases_on_separable_data(self, small_net_cfg):
        rng = np.random.default_rng(0)
        offsets = rng.normal(0, 10, size=(3, 40))
        dataset = [(offsets[c] + rng.normal(0, 1, size=(15, 40)), c) for c in range(3) for _ in range(8)]
        hyper = NetConfig(conv1_channels=6, conv2_channels=6, embed_dim=8, epochs=8, batch=4, lr=0.05)
        result = train(dataset, hyper, seed=1)
        assert len(result.loss_trace) == 8
        assert result.loss_trace[-1] < result.loss_trace[0]

        def mean_loss(params):
            return np.mean([loss_and_gradients(params, x, c, hyper)[0] for x, c in dataset])

        assert mean_loss(result.params) < mean_loss(init_net(1, hyper, n_classes=3))
        assert result.params.n_classes == 3

    def test_zero_epochs_returns_init(self, small_net_cfg):
        dataset = [(random_features(i), i % 2) for i in range(4)]
        hyper = NetConfig(conv1_channels=6, conv2_channels=6, embed_dim=8, epochs=0, batch=4)
        result = train(dataset, hyper, seed=6)
        init = init_net(6, hyper, n_classes=2)
        assert result.loss_trace == []
        for name in TENSOR_NAMES:
            np.testing.assert_array_equal(getattr(result.params, name), getattr(init, name))

    def test_deterministic(self, small_net_cfg):
        dataset = [(random_features(i), i % 2) for i in range(6)]
        a = train(dataset, small_net_cfg, seed=4)
        b = train(dataset, small_net_cfg, seed=4)
        assert a.loss_trace == b.loss_trace
        np.testing.assert_array_equal(a.params.proj_w, b.params.proj_w)

    def test_needs_two_users(self, small_net_cfg):
        with pytest.raises(ConfigError):
            train([(random_features(0), 0), (random_features(1), 0)], small_net_cfg, seed=1)


class TestCheckpoint:
    """Test checkpoint files."""

    def test_save_and_load(self, tmp_path, net):
        save_checkpoint(tmp_path / "ckpt.json", net)
        back = load_checkpoint(tmp_path / "ckpt.json")
        for name in TENSOR_NAMES:
            np.testing.assert_array_equal(getattr(back, name), getattr(net, name))
        assert back.input_scale_db == net.input_scale_db

    def test_rejects_foreign_header(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "resnet", "version": 1, "tensors": []}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)
