import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_mhe import kernels
from lstm_mhe.dataset import Dataset, Sequence
from lstm_mhe.lstm import _MATRIX_FIELDS, LstmParams
from lstm_mhe.training import (
    AdamMoments,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    bptt_gradients,
    clip_gradients,
    evaluate_metrics,
    lr_schedule,
    mse_loss,
    predict,
    split_dataset,
    train,
)
from oracles import fd_param_gradient, lstm_sequence_loss, rel_err


def _toy_dataset(rng, n_seq=10, length=20):
    seqs = []
    for k in range(n_seq):
        x = rng.normal(size=(length, 4))
        seqs.append(Sequence(x, rng.normal(size=(length, 2)), np.arange(length) * 0.1, k))
    return Dataset(seqs)


def _linear_dataset(seed, n_seq, length=50):
    # rates are a fixed linear map of the current inputs
    rng = np.random.default_rng(seed)
    m = np.array([[0.4, -0.2, 0.1, 0.0], [0.0, 0.3, -0.1, 0.2]])
    seqs = []
    for k in range(n_seq):
        x = np.cumsum(rng.normal(scale=0.3, size=(length, 4)), axis=0)
        seqs.append(Sequence(x, x @ m.T + [0.05, -0.02], np.arange(length) * 0.1, k))
    return Dataset(seqs)


class TestSplit:
    def test_counts(self, rng):
        tr, va = split_dataset(_toy_dataset(rng), 0.8, 1)
        assert len(tr) == 8 and len(va) == 2
        assert tr.split == "train" and va.split == "val"

    def test_deterministic_disjoint(self, rng):
        d = _toy_dataset(rng)
        a = split_dataset(d, 0.8, 3)
        b = split_dataset(d, 0.8, 3)
        assert [s.seq_id for s in a[0].sequences] == [s.seq_id for s in b[0].sequences]
        assert not {s.seq_id for s in a[0].sequences} & {s.seq_id for s in a[1].sequences}

    def test_point_ratio(self):
        # 180000 points in 60 sequences of 3000
        seqs = [Sequence(np.zeros((3000, 4)), np.zeros((3000, 2)), np.arange(3000.0), k) for k in range(60)]
        tr, va = split_dataset(Dataset(seqs), 0.8, 0)
        assert abs(tr.n_records - 144_000) <= 3000 and abs(va.n_records - 36_000) <= 3000

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            split_dataset(Dataset([]), 0.8)
        with pytest.raises(ValueError):
            split_dataset(_toy_dataset(rng), 1.0)


class TestLossAndSchedule:
    def test_mse(self, rng):
        a = rng.normal(size=(7, 2))
        assert mse_loss(a, a) == 0.0
        assert mse_loss(a + 2.0, a) == pytest.approx(4.0, rel=1e-14)
        b = rng.normal(size=(7, 2))
        # two-pass accumulation oracle
        sq = [(x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())]
        assert mse_loss(a, b) == pytest.approx(math.fsum(sq) / len(sq), rel=1e-14)
        with pytest.raises(ValueError):
            mse_loss(a, b[:3])

    def test_lr_values(self):
        cfg = TrainConfig()
        assert lr_schedule(cfg, 0) == 0.02
        assert lr_schedule(cfg, 499) == 0.02
        assert lr_schedule(cfg, 500) == pytest.approx(0.015, rel=1e-14)
        assert lr_schedule(cfg, 1000) == pytest.approx(0.01125, rel=1e-14)

    @given(st.integers(0, 20_000), st.integers(0, 20_000))
    def test_lr_non_increasing(self, a, b):
        cfg = TrainConfig()
        lo, hi = sorted((a, b))
        assert lr_schedule(cfg, hi) <= lr_schedule(cfg, lo)

    def test_config(self, tmp_path):
        assert TrainConfig.full_profile().max_epochs == 10000
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"profile": "full", "mini_batch": 64}))
        cfg = TrainConfig.from_json(path)
        assert cfg.max_epochs == 10000 and cfg.mini_batch == 64
        with pytest.raises(ValueError):
            TrainConfig(lr_drop_factor=1.0)
        path.write_text(json.dumps({"epochs": 3}))
        with pytest.raises(ValueError):
            TrainConfig.from_json(path)


class TestAdamAndClip:
    def test_first_step(self):
        cfg = TrainConfig()
        p = [np.array(0.0)]
        out, _ = adam_step(p, [np.array(2.0)], AdamMoments.zeros_like(p), cfg, 1)
        # first bias-corrected step = -lr * g / (|g| + eps)
        assert float(out[0]) == pytest.approx(-0.02 * 2.0 / (2.0 + 1e-8), rel=1e-12)

    def test_zero_gradient(self, rng):
        cfg = TrainConfig(l2=0.0)
        p = [rng.normal(size=(3, 2))]
        out, _ = adam_step(p, [np.zeros((3, 2))], AdamMoments.zeros_like(p), cfg, 1)
        np.testing.assert_array_equal(out[0], p[0])

    def test_l2_pulls_toward_zero(self):
        cfg = TrainConfig(l2=0.1)
        p = [np.array([1.0, -1.0])]
        out, _ = adam_step(p, [np.zeros(2)], AdamMoments.zeros_like(p), cfg, 1)
        assert out[0][0] < 1.0 and out[0][1] > -1.0
        out, _ = adam_step(p, [np.zeros(2)], AdamMoments.zeros_like(p), cfg, 1, decay=(False,))
        np.testing.assert_array_equal(out[0], p[0])

    def test_deterministic(self, rng):
        cfg = TrainConfig()
        p = [rng.normal(size=4)]
        g = [rng.normal(size=4)]
        m = AdamMoments.zeros_like(p)
        a = adam_step(p, g, m, cfg, 3)
        b = adam_step(p, g, m, cfg, 3)
        np.testing.assert_array_equal(a[0][0], b[0][0])

    def test_non_finite(self):
        p = [np.zeros(2)]
        with pytest.raises(TrainingDiverged):
            adam_step(p, [np.array([np.nan, 0.0])], AdamMoments.zeros_like(p), TrainConfig(), 1)

    def test_clip_identity_below(self):
        g = [np.array([0.3, 0.4])]
        np.testing.assert_array_equal(clip_gradients(g, 1.0)[0], g[0])

    def test_clip_scales(self):
        g = [np.array([2.0, 0.0]), np.array([[0.0, 2.0 * math.sqrt(3.0)]])]
        out = clip_gradients(g, 1.0)
        norm = math.sqrt(sum(float(np.sum(x * x)) for x in out))
        assert norm == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12), st.floats(0.01, 10))
    def test_clip_properties(self, vals, thr):
        g = np.array(vals)
        out = clip_gradients([g], thr)[0]
        assert np.linalg.norm(out) <= max(np.linalg.norm(g), 0.0) + 1e-12
        if np.linalg.norm(g) > 1e-9:
            cos = out @ g / (np.linalg.norm(out) * np.linalg.norm(g))
            assert cos == pytest.approx(1.0, abs=1e-12)
        with pytest.raises(ValueError):
            clip_gradients([g], 0.0)


def _fields(p):
    return {n: np.array(getattr(p, n)) for n in _MATRIX_FIELDS}


class TestBptt:
    def test_finite_differences(self, rng):
        worst = 0.0
        for _ in range(20):
            p = LstmParams.random(rng, scale=0.5)
            x = rng.normal(size=(5, 4))
            y = rng.normal(size=(5, 2))
            loss, grads = bptt_gradients(p, x, y)
            f = _fields(p)
            assert loss == pytest.approx(lstm_sequence_loss(f, x, y), rel=1e-12)
            fd = fd_param_gradient(f, x, y)
            worst = max(worst, max(rel_err(grads[n], fd[n]) for n in fd))
        assert worst < 1e-4

    def test_fit_network_zero_gradient(self, rng):
        p = LstmParams.random(rng).with_(fc_w=np.zeros((2, 8)), fc_b=np.array([0.3, -0.1]))
        loss, grads = bptt_gradients(p, rng.normal(size=(30, 4)), np.tile([0.3, -0.1], (30, 1)))
        assert loss == 0.0
        assert math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) < 1e-10

    def test_length_one(self, rng):
        # single step from zero state: c = i*g, h = o*tanh(c)
        p = LstmParams.random(rng)
        x = rng.normal(size=(1, 4))
        y = rng.normal(size=(1, 2))
        _, grads = bptt_gradients(p, x, y)
        u = x[0]

        def s(z):
            return 1 / (1 + np.exp(-z))
        i = s(p.w_u_i @ u + p.b_i)
        g = np.tanh(p.w_u_g @ u + p.b_g)
        o = s(p.w_u_o @ u + p.b_o)
        c = i * g
        h = o * np.tanh(c)
        de = (p.fc_w @ h + p.fc_b - y[0]) * 2 / 2
        dh = p.fc_w.T @ de
        dc = dh * o * (1 - np.tanh(c) ** 2)
        np.testing.assert_allclose(grads["fc_b"], de, rtol=1e-12)
        np.testing.assert_allclose(grads["fc_w"], np.outer(de, h), rtol=1e-12)
        np.testing.assert_allclose(grads["b_o"], dh * np.tanh(c) * o * (1 - o), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(grads["b_i"], dc * g * i * (1 - i), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(grads["w_u_g"], np.outer(dc * i * (1 - g * g), u), rtol=1e-12, atol=1e-15)
        # no recurrence: forget gate and recurrent weights receive nothing
        assert np.all(grads["b_f"] == 0) and np.all(grads["w_h_i"] == 0)

    def test_mask_excludes_padding(self, rng):
        p = LstmParams.random(rng)
        x = rng.normal(size=(6, 4))
        y = rng.normal(size=(6, 2))
        mask = np.array([1, 1, 1, 1, 0, 0.0])
        a = bptt_gradients(p, x, y, mask)
        y2 = y.copy()
        y2[4:] += 100.0
        b = bptt_gradients(p, x, y2, mask)
        c = bptt_gradients(p, x[:4], y[:4])
        assert a[0] == b[0] == pytest.approx(c[0], rel=1e-13)
        for n in a[1]:
            np.testing.assert_allclose(a[1][n], c[1][n], rtol=1e-12, atol=1e-15)

    def test_numba_numpy_agree(self, rng):
        p = LstmParams.random(rng)
        x = rng.normal(size=(3, 7, 4))
        y = rng.normal(size=(3, 7, 2))
        mask = np.ones((3, 7))
        mask[1, 5:] = 0
        a = kernels.seq_loss_grad_nb(*p.stacked, x, y, mask)
        b = kernels.seq_loss_grad_np(*p.stacked, x, y, mask)
        assert a[0] == pytest.approx(b[0], rel=1e-12)
        for ga, gb in zip(a[2:], b[2:]):
            np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(kernels.seq_predict_nb(*p.stacked, x), kernels.seq_predict_np(*p.stacked, x),
                                   rtol=1e-12, atol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            bptt_gradients(LstmParams.zeros(), np.zeros((0, 4)), np.zeros((0, 2)))


class TestTrain:
    def test_zero_epochs(self):
        d = _linear_dataset(0, 6)
        tr, va = split_dataset(d, 0.8, 0)
        p, rep = train(tr, va, TrainConfig(max_epochs=0, decimate=1))
        assert rep.val_iterations == [0]
        assert math.isfinite(rep.best_val_loss) and rep.best_val_loss == rep.val_loss[0]
        assert rep.train_loss == []

    def test_linear_generator(self):
        tr = _linear_dataset(1, 40)
        va = _linear_dataset(2, 10)
        te = _linear_dataset(3, 10)
        p, rep = train(tr, va, TrainConfig(max_epochs=200, decimate=1, mini_batch=16))
        assert not rep.diverged
        m = evaluate_metrics(p, te)
        assert m["dtheta_w"].nrmse < 0.10 and m["dtheta_r"].nrmse < 0.10
        assert rep.best_val_loss == min(rep.val_loss)

    def test_best_checkpoint_replay(self):
        tr = _linear_dataset(4, 12)
        va = _linear_dataset(5, 4)
        p, rep = train(tr, va, TrainConfig(max_epochs=30, decimate=1, mini_batch=4, val_frequency=3))
        std = np.array(rep.target_std)
        err = [((predict(p, s.inputs) - s.targets) / std) ** 2 for s in va.sequences]
        assert float(np.mean(np.concatenate(err))) == pytest.approx(rep.best_val_loss, rel=1e-9)
        assert rep.best_iteration in rep.val_iterations
        assert rep.val_iterations[-1] == rep.train_iterations[-1]

    def test_deterministic(self):
        tr = _linear_dataset(6, 8)
        va = _linear_dataset(7, 2)
        cfg = TrainConfig(max_epochs=15, decimate=1, mini_batch=4)
        p1, r1 = train(tr, va, cfg)
        p2, r2 = train(tr, va, cfg)
        assert json.dumps(r1.to_dict()) == json.dumps(r2.to_dict())
        for n in _MATRIX_FIELDS:
            np.testing.assert_array_equal(getattr(p1, n), getattr(p2, n))

    def test_divergence_is_reported(self, monkeypatch):
        real = kernels.seq_loss_grad
        calls = {"n": 0}

        def flaky(*args):
            calls["n"] += 1
            out = real(*args)
            return (math.nan,) + out[1:] if calls["n"] > 6 else out

        monkeypatch.setattr(kernels, "seq_loss_grad", flaky)
        p, rep = train(_linear_dataset(8, 4), _linear_dataset(9, 2),
                       TrainConfig(max_epochs=50, decimate=1, val_frequency=2))
        assert rep.diverged and "non-finite" in rep.message
        assert rep.best_val_loss == min(rep.val_loss)
        assert np.all(np.isfinite(p.fc_w))

    def test_report_json(self, tmp_path):
        tr = _linear_dataset(10, 4)
        _, rep = train(tr, _linear_dataset(11, 2), TrainConfig(max_epochs=2, decimate=1))
        rep.metrics = evaluate_metrics(LstmParams.zeros(), tr)
        rep.to_json(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert set(data["metrics"]["dtheta_w"]) == {"mae", "rmse", "nrmse"}


class TestMetrics:
    def _ds(self, rng):
        x = rng.normal(size=(40, 4))
        return Dataset([Sequence(x, rng.normal(size=(40, 2)), np.arange(40.0))])

    def test_perfect_and_offset(self, rng):
        ds = self._ds(rng)
        p = LstmParams.random(rng)
        tgt = predict(p, ds.sequences[0].inputs)
        exact = Dataset([Sequence(ds.sequences[0].inputs, tgt, ds.sequences[0].t)])
        m = evaluate_metrics(p, exact)
        assert all(v == (0.0, 0.0, 0.0) for v in m.values())
        shifted = Dataset([Sequence(ds.sequences[0].inputs, tgt - 0.1, ds.sequences[0].t)])
        m = evaluate_metrics(p, shifted)
        for v in m.values():
            assert v.mae == pytest.approx(0.1, abs=1e-12) and v.rmse == pytest.approx(0.1, abs=1e-12)

    def test_nrmse_is_range_normalised(self, rng):
        p = LstmParams.zeros()
        t = np.column_stack([np.linspace(-1, 3, 50), np.linspace(0, 0.5, 50)])
        ds = Dataset([Sequence(np.zeros((50, 4)), t, np.arange(50.0))])
        m = evaluate_metrics(p, ds)
        assert m["dtheta_w"].nrmse == pytest.approx(m["dtheta_w"].rmse / 4.0, rel=1e-12)

    def test_zero_range_flagged(self):
        ds = Dataset([Sequence(np.zeros((5, 4)), np.ones((5, 2)), np.arange(5.0))])
        m = evaluate_metrics(LstmParams.zeros(), ds)
        assert math.isnan(m["dtheta_w"].nrmse)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_metrics(LstmParams.zeros(), Dataset([]))
