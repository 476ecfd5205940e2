import math

import numpy as np
import pytest

from intenreg import losses
from intenreg.amortized import (
    AmortizedEngine,
    TrainConfig,
    backward,
    conv2d,
    conv2d_backward,
    forward,
    forward_with_cache,
    init_params,
    load_checkpoint,
    loss_and_grads,
    lrelu,
    lrelu_backward,
    param_shapes,
    predict_register,
    save_checkpoint,
    train,
    upsample2,
    upsample2_backward,
)
from intenreg.errors import ContractError, DimensionError, ParseError, ValidationError
from intenreg.evalharness import mean_dice
from intenreg.losses import LossConfig, composite_loss
from intenreg.optdirect import StopRule
from intenreg.phantom import PhantomConfig, generate_corpus

from conftest import assert_grad_close, field_is_smooth_at, net_fd, net_instance
from oracles import central_diff


class TestLayers:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv_fd(self, rng, stride):
        for _ in range(5):
            x = rng.normal(size=(3, 6, 6))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            out, cols = conv2d(x, w, b, stride)
            up = rng.normal(size=out.shape)
            dx, dw, db = conv2d_backward(up, cols, w, x.shape, stride)
            obj = lambda x_, w_, b_: float(np.sum(up * conv2d(x_, w_, b_, stride)[0]))
            assert_grad_close(dx, central_diff(lambda a: obj(a, w, b), x), rtol=1e-4)
            assert_grad_close(dw, central_diff(lambda a: obj(x, a, b), w), rtol=1e-4)
            assert_grad_close(db, central_diff(lambda a: obj(x, w, a), b), rtol=1e-4)

    def test_conv_output_shapes(self, rng):
        x = rng.normal(size=(2, 10, 8))
        w = rng.normal(size=(5, 2, 3, 3))
        assert conv2d(x, w, np.zeros(5), 1)[0].shape == (5, 10, 8)
        assert conv2d(x, w, np.zeros(5), 2)[0].shape == (5, 5, 4)

    def test_conv_forward_hand(self):
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 2] = 1.0  # picks the right-hand neighbour
        out, _ = conv2d(x, w, np.array([0.5]))
        np.testing.assert_array_equal(out[0], [[1.5, 2.5, 0.5], [4.5, 5.5, 0.5], [7.5, 8.5, 0.5]])

    def test_conv_backward_hand(self):
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        w = np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3)
        out, cols = conv2d(x, w, np.zeros(1))
        up = np.zeros_like(out)
        up[0, 1, 1] = 1.0
        dx, dw, db = conv2d_backward(up, cols, w, x.shape)
        # the centre output sees the whole input, each pixel through one tap
        np.testing.assert_array_equal(dw[0, 0], x[0])
        np.testing.assert_array_equal(dx[0], w[0, 0])
        assert db[0] == 1.0
        up[:] = 0.0
        up[0, 0, 0] = 1.0
        dx, dw, _ = conv2d_backward(up, cols, w, x.shape)
        np.testing.assert_array_equal(dw[0, 0], [[0, 0, 0], [0, 0, 1], [0, 3, 4]])
        np.testing.assert_array_equal(dx[0], [[5, 6, 0], [8, 9, 0], [0, 0, 0]])

    def test_lrelu(self, rng):
        z = np.array([-2.0, -0.5, 0.5, 3.0])
        np.testing.assert_array_equal(lrelu(z), [-0.4, -0.1, 0.5, 3.0])
        for _ in range(5):
            z = rng.normal(size=(3, 4, 4))
            z[np.abs(z) < 1e-3] = 0.5
            up = rng.normal(size=z.shape)
            num = central_diff(lambda a: float(np.sum(up * lrelu(a))), z)
            assert_grad_close(lrelu_backward(up, z), num, rtol=1e-4)

    def test_upsample(self, rng):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(upsample2(x)[0, :2, :2], [[1, 1], [1, 1]])
        assert upsample2(x).shape == (1, 4, 4)
        for _ in range(5):
            x = rng.normal(size=(2, 3, 4))
            up = rng.normal(size=(2, 6, 8))
            num = central_diff(lambda a: float(np.sum(up * upsample2(a))), x)
            assert_grad_close(upsample2_backward(up), num, rtol=1e-4)


class TestNetwork:
    def test_param_shapes(self):
        shapes = param_shapes()
        assert shapes["enc1.w"] == (16, 2, 3, 3)
        assert shapes["enc2.w"] == (32, 16, 3, 3)
        assert shapes["mid.w"] == (32, 32, 3, 3)
        assert shapes["dec1.w"] == (16, 48, 3, 3)
        assert shapes["head.w"] == (2, 16, 3, 3)

    @pytest.mark.parametrize("shape", [(96, 96), (160, 192), (8, 8), (10, 14)])
    def test_output_shape(self, rng, shape):
        u = forward(init_params(0), rng.random(shape), rng.random(shape))
        assert u.shape == (2,) + shape

    def test_fresh_init_near_identity(self, rng):
        for seed in range(3):
            u = forward(init_params(seed), rng.random((96, 96)), rng.random((96, 96)))
            assert np.abs(u).max() < 0.01

    def test_init_reproducible(self):
        a, b = init_params(7), init_params(7)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["enc1.w"], init_params(8)["enc1.w"])
        assert not any(init_params(7)[k].any() for k in a if k.endswith(".b"))

    def test_odd_shape_rejected(self, rng):
        with pytest.raises(DimensionError):
            forward(init_params(0), rng.random((9, 8)), rng.random((9, 8)))

    def test_missing_tensor(self, rng):
        p = init_params(0)
        del p["mid.b"]
        with pytest.raises(ValidationError):
            forward(p, rng.random((8, 8)), rng.random((8, 8)))

    def test_zero_upstream(self, rng):
        p = init_params(0)
        _, cache = forward_with_cache(p, rng.random((8, 8)), rng.random((8, 8)))
        g = backward(p, cache, np.zeros((2, 8, 8)))
        assert list(g) == list(param_shapes())
        assert not any(v.any() for v in g.values())

    def test_contract_violations(self, rng):
        p = init_params(0)
        _, cache = forward_with_cache(p, rng.random((8, 8)), rng.random((8, 8)))
        other = {k: v.copy() for k, v in p.items()}
        with pytest.raises(ContractError):
            backward(other, cache, np.zeros((2, 8, 8)))
        with pytest.raises(ContractError):
            backward(p, cache, np.zeros((2, 10, 8)))

    def test_network_fd_sampled(self):
        rng = np.random.default_rng(0)
        for start in (0, 40):
            params, t, s = net_instance(start=start)
            wts = rng.normal(size=(2, 8, 8))
            _, cache = forward_with_cache(params, t, s)
            g = backward(params, cache, wts)
            num = net_fd(params, lambda p: float(np.sum(wts * forward(p, t, s))), per_tensor=30, rng=rng)
            for k, (idx, n) in num.items():
                assert_grad_close(g[k].reshape(-1)[idx], n, rtol=1e-3)

    @pytest.mark.parametrize("alpha,base", [(0.0, "mse"), (0.75, "ncc")])
    def test_end_to_end_fd(self, alpha, base):
        rng = np.random.default_rng(1)
        cfg = LossConfig(alpha=alpha, base=base, window=5)
        start = 0
        while True:
            params, t, s = net_instance(size=12, head_std=0.05, start=start)
            if field_is_smooth_at(forward(params, t, s)):
                break
            start += 1
        _, g = loss_and_grads(params, t, s, cfg)
        num = net_fd(params, lambda p: composite_loss(t, s, forward(p, t, s), cfg)[0].total,
                     per_tensor=20, rng=rng)
        for k, (idx, n) in num.items():
            assert_grad_close(g[k].reshape(-1)[idx], n, rtol=1e-3, atol=1e-7)


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(PhantomConfig(height=24, width=24, seed=5), 4)


class TestTraining:
    def test_deterministic(self, tiny_corpus):
        cfg = TrainConfig(batch_size=2, lr=1e-3, max_epochs=3, seed=4)
        pa, ra = train(init_params(1), tiny_corpus, cfg)
        pb, rb = train(init_params(1), tiny_corpus, cfg)
        assert ra == rb
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)

    def test_seed_matters(self, tiny_corpus):
        a = train(init_params(1), tiny_corpus, TrainConfig(batch_size=2, max_epochs=2, seed=0))[1]
        b = train(init_params(1), tiny_corpus, TrainConfig(batch_size=2, max_epochs=2, seed=1))[1]
        assert a.epoch_losses != b.epoch_losses

    def test_input_not_mutated(self, tiny_corpus):
        p = init_params(2)
        before = {k: v.copy() for k, v in p.items()}
        train(p, tiny_corpus, TrainConfig(batch_size=2, max_epochs=1))
        assert all(np.array_equal(p[k], before[k]) for k in p)

    def test_infinite_delta_stops_at_patience(self, tiny_corpus):
        cfg = TrainConfig(batch_size=4, max_epochs=50, stop=StopRule(delta=math.inf, patience=3))
        _, rep = train(init_params(0), tiny_corpus, cfg)
        assert rep.epochs_run == 3 and rep.stopped_by == "patience"
        assert len(rep.epoch_losses) == rep.epochs_run

    def test_steps_per_epoch(self, tiny_corpus):
        _, rep = train(init_params(0), tiny_corpus, TrainConfig(batch_size=1, max_epochs=2))
        assert len(rep.step_losses) == 8

    def test_alpha_zero_never_touches_ssim(self, tiny_corpus):
        calls = []
        losses.SSIM_HOOKS.append(lambda: calls.append(1))
        try:
            train(init_params(0), tiny_corpus, TrainConfig(batch_size=2, max_epochs=2, loss=LossConfig(alpha=0.0)))
            assert len(calls) == 0
            train(init_params(0), tiny_corpus, TrainConfig(batch_size=2, max_epochs=1,
                                                           loss=LossConfig(alpha=0.5, window=5)))
            assert len(calls) == 4
        finally:
            losses.SSIM_HOOKS.pop()

    def test_corpus_errors(self, tiny_corpus, rng):
        with pytest.raises(ValidationError):
            train(init_params(0), tiny_corpus[:1])
        with pytest.raises(DimensionError):
            train(init_params(0), [rng.random((8, 8)), rng.random((10, 10))])

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        d = TrainConfig()
        assert (d.batch_size, d.lr, d.stop.delta, d.stop.patience) == (5, 1e-4, 1e-7, 25)


class TestPredict:
    def test_untrained_keeps_dice(self, tiny_corpus):
        a, b = tiny_corpus[0], tiny_corpus[1]
        res = predict_register(init_params(0), a.image, b.image, b.labels)
        assert len(res.loss_trace) == 1
        assert abs(mean_dice(a.labels, res.warped_labels) - mean_dice(a.labels, b.labels)) <= 1e-3
        assert np.abs(res.warped - b.image).max() < 0.01

    def test_deterministic(self, tiny_corpus):
        eng = AmortizedEngine(init_params(3))
        a, b = tiny_corpus[0], tiny_corpus[2]
        assert np.array_equal(eng(a.image, b.image).field, eng(a.image, b.image).field)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        p = init_params(11)
        p["mid.b"] = np.random.default_rng(0).normal(size=32)
        save_checkpoint(p, tmp_path / "a.ckpt")
        q = load_checkpoint(tmp_path / "a.ckpt")
        assert list(q) == list(p)
        for k in p:
            assert q[k].dtype == np.float64
            assert q[k].tobytes() == p[k].tobytes()
        save_checkpoint(q, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_corrupt_files(self, tmp_path):
        save_checkpoint(init_params(0), tmp_path / "ok.ckpt")
        good = (tmp_path / "ok.ckpt").read_bytes()
        cases = {"magic": b"NOPE" + good[4:], "trunc": good[:-8], "trail": good + b"\0", "head": good[:15]}
        for name, data in cases.items():
            (tmp_path / name).write_bytes(data)
            with pytest.raises(ParseError):
                load_checkpoint(tmp_path / name)

    def test_non_finite_refused(self, tmp_path):
        p = init_params(0)
        p["head.b"][0] = np.inf
        with pytest.raises(ValidationError):
            save_checkpoint(p, tmp_path / "x.ckpt")
