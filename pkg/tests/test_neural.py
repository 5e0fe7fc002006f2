import json

import numpy as np
import pytest

from mcre.errors import DimensionError, TrainingDivergenceError, ValidationError
from mcre.neural import (Mlp, OptimState, adam_step, backward, finite_difference_check, forward,
                         forward_with_cache, init_mlp, load_checkpoint, save_checkpoint,
                         soft_update)


def manual_forward(net, x):
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < len(net.weights) - 1:
            h = np.maximum(h, 0.0)
    return net.bound * np.tanh(h) if net.output_activation == "tanh" else h


class TestForward:
    def test_zero_net(self):
        net = Mlp([3, 5, 2])
        np.testing.assert_array_equal(forward(net, np.ones(3)), np.zeros(2))

    def test_linear_layer(self):
        rng = np.random.default_rng(0)
        net = init_mlp([4, 3], rng)
        x = rng.normal(size=(6, 4))
        np.testing.assert_allclose(forward(net, x), x @ net.weights[0] + net.biases[0], atol=1e-14)

    def test_deep_matches_manual(self):
        rng = np.random.default_rng(1)
        net = init_mlp([3, 8, 8, 2], rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(net(x), manual_forward(net, x), atol=1e-14)

    def test_bounded_output_open_interval(self):
        net = init_mlp([2, 4, 1], np.random.default_rng(2), "tanh", 1.0)
        net.params *= 1e3
        out = net(np.random.default_rng(3).normal(size=(500, 2)) * 100)
        assert np.all(np.abs(out) < 1.0)

    def test_single_vector_shape(self):
        net = init_mlp([2, 3, 4], np.random.default_rng(0))
        assert net(np.zeros(2)).shape == (4,)
        assert net(np.zeros((5, 2))).shape == (5, 4)

    def test_bad_input(self):
        net = Mlp([2, 3])
        with pytest.raises(DimensionError):
            net(np.zeros((4, 3)))
        with pytest.raises(ValidationError):
            Mlp([2])
        with pytest.raises(DimensionError):
            Mlp([2, 3], params=np.zeros(5))

    def test_params_are_shared_views(self):
        net = Mlp([2, 3])
        net.weights[0][0, 0] = 4.0
        assert net.params[0] == 4.0
        net.set_params(np.arange(9.0))
        assert net.biases[0][0] == 6.0


class TestBackward:
    @pytest.mark.parametrize("dims,act", [([3, 16, 16, 1], "identity"), ([2, 8, 3], "tanh"),
                                          ([5, 4], "identity")])
    def test_finite_differences(self, dims, act):
        rng = np.random.default_rng(4)
        net = init_mlp(dims, rng, act, 2.0)
        x = rng.normal(size=(7, dims[0]))
        target = rng.normal(size=(7, dims[-1]))

        def loss(p):
            out = Mlp(dims, act, 2.0, p)(x)
            return 0.5 * np.sum((out - target) ** 2)

        out, cache = forward_with_cache(net, x)
        grad, gx = backward(net, x, out - target, cache=cache)
        assert finite_difference_check(loss, net.params, grad, n_probes=10, rng=rng) <= 1e-4

        def loss_x(xflat):
            return 0.5 * np.sum((net(xflat.reshape(x.shape)) - target) ** 2)

        assert finite_difference_check(loss_x, x.ravel().copy(), gx.ravel(), n_probes=10,
                                       rng=rng) <= 1e-4

    def test_detects_wrong_gradient(self):
        w = np.array([0.3, -1.2, 2.0])
        loss = lambda p: float(np.sum(p ** 3))  # noqa: E731
        assert finite_difference_check(loss, w, 3 * w ** 2 * 1.01, n_probes=3) > 5e-3
        assert finite_difference_check(loss, w, 3 * w ** 2, n_probes=3) < 1e-8

    def test_kink_inside_stencil(self):
        # relu(p - 3e-6) at p = 0 has slope 0, but a 1e-5 stencil straddles the kink
        loss = lambda p: float(np.maximum(p[0] - 3e-6, 0.0))  # noqa: E731
        w = np.zeros(1)
        assert finite_difference_check(loss, w, np.zeros(1), n_probes=1, max_shrink=0) > 0.1
        assert finite_difference_check(loss, w, np.zeros(1), n_probes=1) == 0.0
        assert w[0] == 0.0

    def test_zero_upstream(self):
        net = init_mlp([3, 4, 2], np.random.default_rng(0))
        grad, gx = backward(net, np.ones((2, 3)), np.zeros((2, 2)))
        assert not grad.any() and not gx.any()

    def test_linear_outer_product(self):
        net = init_mlp([3, 1], np.random.default_rng(0))
        x = np.array([[1.0, -2.0, 0.5]])
        grad, _ = backward(net, x, np.array([[3.0]]))
        np.testing.assert_allclose(grad[:3], 3.0 * x[0])
        assert grad[3] == 3.0


class TestAdam:
    def test_zero_gradient(self):
        w = np.array([1.0, -2.0])
        st = OptimState.for_params(w, lr=0.1)
        adam_step(w, np.zeros(2), st)
        np.testing.assert_array_equal(w, [1.0, -2.0])

    def test_descends(self):
        w = np.zeros(3)
        st = OptimState.for_params(w, lr=0.01)
        for _ in range(50):
            adam_step(w, np.array([1.0, -1.0, 2.0]), st)
        assert w[0] < 0 and w[1] > 0 and w[2] < 0

    def test_quadratic_bowl(self):
        w = np.random.default_rng(0).normal(size=5)
        st = OptimState.for_params(w, lr=1e-2)
        for _ in range(2000):
            adam_step(w, 2.0 * w, st)
        assert np.linalg.norm(w) < 1e-3

    def test_rejects_nan(self):
        w = np.zeros(2)
        with pytest.raises(TrainingDivergenceError):
            adam_step(w, np.array([np.nan, 0.0]), OptimState.for_params(w))


class TestSoftUpdate:
    def test_examples(self):
        t = np.zeros(3)
        soft_update(t, np.full(3, 2.0), 0.5)
        np.testing.assert_array_equal(t, 1.0)
        soft_update(t, np.full(3, 7.0), 0.0)
        np.testing.assert_array_equal(t, 1.0)
        soft_update(t, np.full(3, 7.0), 1.0)
        np.testing.assert_array_equal(t, 7.0)

    def test_gap_shrinks_by_factor(self):
        rng = np.random.default_rng(0)
        target, online = init_mlp([2, 4, 1], rng), init_mlp([2, 4, 1], rng)
        before = np.max(np.abs(target.params - online.params))
        soft_update(target, online, 0.005)
        after = np.max(np.abs(target.params - online.params))
        assert after == pytest.approx(0.995 * before, rel=1e-12)

    def test_invalid_tau(self):
        with pytest.raises(ValidationError):
            soft_update(np.zeros(1), np.zeros(1), 1.5)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        nets = {"actor": init_mlp([2, 4, 1], rng, "tanh", 1.0), "critic": init_mlp([3, 4, 1], rng)}
        arrays = {"mean": np.array([1.5, -2.0])}
        save_checkpoint(tmp_path, nets, arrays, {"step": 7})
        back, arrs, meta = load_checkpoint(tmp_path)
        for name, net in nets.items():
            np.testing.assert_array_equal(back[name].params, net.params)
            assert back[name].manifest() == net.manifest()
        np.testing.assert_array_equal(arrs["mean"], arrays["mean"])
        assert meta == {"step": 7}
        assert (tmp_path / "params.bin").stat().st_size == 8 * (17 + 21 + 2)

    def test_resave_identical(self, tmp_path):
        nets = {"n": init_mlp([2, 3], np.random.default_rng(1))}
        save_checkpoint(tmp_path / "a", nets)
        back, _, _ = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", back)
        for f in ("params.bin", "manifest.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_truncated_blob(self, tmp_path):
        save_checkpoint(tmp_path, {"n": init_mlp([2, 3], np.random.default_rng(1))})
        blob = (tmp_path / "params.bin").read_bytes()
        (tmp_path / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path)

    def test_wrong_count(self, tmp_path):
        save_checkpoint(tmp_path, {"n": init_mlp([2, 3], np.random.default_rng(1))})
        man = json.loads((tmp_path / "manifest.json").read_text())
        man["entries"][0]["layer_dims"] = [3, 3]
        (tmp_path / "manifest.json").write_text(json.dumps(man))
        with pytest.raises(ValidationError):
            load_checkpoint(tmp_path)
