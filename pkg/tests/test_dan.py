"""Two-stream network: forward, loss, training loop, prediction, checkpoints."""

import copy

import numpy as np
import pytest

from danlab.attention import gaussian_kernel
from danlab.autodiff import Tape, Tensor, backward, softmax_array
from danlab.dan import (
    CKPT_MAGIC,
    OptimizerState,
    Stream,
    TrainConfig,
    TrainingError,
    TwoStreamDAN,
    ablate,
    load_checkpoint,
    load_model,
    predict,
    preset,
    save_model,
    train,
)
from danlab.layers import weighted_softmax_ce
from danlab.selfcheck import dan_gradcheck

ARCH = preset("tiny", 2)


def _dan(**kw):
    kw.setdefault("dtype", np.float64)
    return TwoStreamDAN(ARCH, 2, **kw)


def _batch(seed=0, n=2, side=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 1, side, side)), rng.integers(0, 2, size=(n, side, side))


def _grads(dan, x, y):
    for _, p in dan.parameters():
        p.grad = None
    with Tape() as tape:
        p, q, _ = dan.forward(x)
        loss = dan.compute_loss(p, q, y)
    backward(tape, loss)
    return loss, {n: (None if t.grad is None else t.grad.copy()) for n, t in dan.parameters()}


class TestForward:
    def test_same_init_gives_equal_streams(self):
        x, _ = _batch()
        p, q, fused = _dan(same_init=True)(x)
        assert np.array_equal(p.data, q.data)
        assert np.array_equal(fused, softmax_array(2 * p.data, axis=1))

    def test_streams_differ_by_default(self):
        dan = _dan()
        assert not np.array_equal(dan.stream_a.layers[0].weight.data, dan.stream_b.layers[0].weight.data)
        assert dan.stream_a.layers[0].weight.data is not dan.stream_b.layers[0].weight.data

    def test_open_gates_equal_plain_network(self):
        x, _ = _batch(1)
        dan = _dan()
        dan.force_open = True
        p, q, _ = dan(x)
        plain = ablate(dan, [])
        p0, q0, _ = plain(x)
        assert np.array_equal(p.data, p0.data) and np.array_equal(q.data, q0.data)

    def test_fused_is_normalised(self):
        x, _ = _batch(2, n=3, side=12)
        _, _, fused = _dan(seed=4)(x)
        assert np.all(np.abs(fused.sum(axis=1) - 1) < 1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            _dan()(np.zeros((1, 2, 8, 8)))

    def test_unknown_site(self):
        with pytest.raises(ValueError):
            _dan(enabled=["5"])

    def test_class_count_must_match(self):
        with pytest.raises(ValueError):
            TwoStreamDAN(ARCH, 3)


class TestReductions:
    def test_disabled_dan_is_two_standalone_streams(self):
        x, y = _batch(3)
        dan = ablate(_dan(seed=7), [])
        solo = Stream(ARCH, np.random.default_rng(7), np.float64)
        _, grads = _grads(dan, x, y)
        for _, t in solo.parameters():
            t.grad = None
        with Tape() as tape:
            h = Tensor(x)
            for i in range(len(ARCH.layers)):
                h = solo.layer(i, h)
            loss = weighted_softmax_ce(h, y)
        backward(tape, loss)
        p, _, _ = dan(x)
        assert np.array_equal(p.data, h.data)
        for n, t in solo.parameters():
            assert np.array_equal(grads[f"a.{n}"], t.grad), n

    def test_agreement_annihilates_every_gradient(self):
        x, y = _batch(4)
        loss, grads = _grads(_dan(same_init=True), x, y)
        assert float(loss.data) == 0.0
        assert all(g is None or not g.any() for g in grads.values())

    def test_la_disabled_is_plain_ce(self):
        x, y = _batch(5)
        dan = ablate(_dan(), ["1", "2", "3"])
        p, q, _ = dan(x)
        got = float(dan.compute_loss(p, q, y).data)
        assert got == float(weighted_softmax_ce(p, y).data) + float(weighted_softmax_ce(q, y).data)

    def test_warmup_switch_is_plain_ce(self):
        x, y = _batch(5)
        dan = _dan()
        dan.la_open = True
        p, q, _ = dan(x)
        assert dan.loss_weights(p, q) is None

    def test_smoothed_loss_matches_hand_computation(self):
        dan = _dan(la_kernel=gaussian_kernel(3, 0.5, 2))
        p_logits = np.zeros((1, 2, 6, 6))
        p_logits[:, 0] = 1.0
        q_logits = p_logits.copy()
        q_logits[0, :, 2, 3] = [0.0, 1.0]
        y = np.zeros((1, 6, 6), dtype=int)
        got = float(dan.compute_loss(Tensor(p_logits), Tensor(q_logits), y).data)
        k = gaussian_kernel(3, 0.5, 2).weights
        w = np.zeros((6, 6))
        w[1:4, 2:5] = k
        ce_p = np.full((6, 6), np.log1p(np.exp(-1.0)))
        ce_q = ce_p.copy()
        ce_q[2, 3] = np.log1p(np.exp(1.0))
        want = float((w * ce_p).sum() / 36 + (w * ce_q).sum() / 36)
        assert abs(got - want) < 1e-12

    def test_stream_swap_symmetry(self):
        x, y = _batch(6)
        dan = _dan(seed=3)
        p, q, fused = dan(x)
        sw = dan.swapped()
        p2, q2, fused2 = sw(x)
        assert np.array_equal(p.data, q2.data) and np.array_equal(q.data, p2.data)
        assert np.array_equal(fused, fused2)
        assert np.array_equal(dan.loss_weights(p, q), sw.loss_weights(p2, q2))
        assert float(dan.compute_loss(p, q, y).data) == float(sw.compute_loss(p2, q2, y).data)

    def test_ablation_keeps_original(self):
        dan = _dan()
        assert ablate(dan, ["4"]).enabled == frozenset({"4"})
        assert dan.enabled == frozenset({"1", "2", "3", "4"})
        with pytest.raises(ValueError):
            ablate(dan, ["0"])

    def test_model_gradcheck(self):
        assert dan_gradcheck(max_coords=4) < 1e-4


class TestTraining:
    def _data(self, n=6, side=8):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(n, 1, side, side))
        return x, (x[:, 0] > 0).astype(np.int64)

    def test_zero_lr_keeps_weights(self):
        x, y = self._data()
        dan = _dan()
        before = {n: p.data.copy() for n, p in dan.parameters()}
        train(dan, x, y, OptimizerState(lr=0.0, max_iters=1, batch=2))
        assert all(np.array_equal(before[n], p.data) for n, p in dan.parameters())

    def test_runs_are_reproducible(self):
        x, y = self._data()
        runs = []
        for _ in range(2):
            dan = _dan(seed=1, dtype=np.float32)
            log_ = train(dan, x, y, OptimizerState(lr=0.05, max_iters=6, batch=2, seed=3))
            runs.append((log_.losses(), dan.state_dict()))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_open_gates_trajectory_matches_plain_network(self):
        x, y = self._data()
        logs = []
        for sites, force in ((["1", "2", "3"], True), ([], False)):
            dan = ablate(_dan(same_init=True, dtype=np.float32), sites)
            dan.force_open = force
            logs.append(train(dan, x, y, OptimizerState(lr=0.05, max_iters=5, batch=2)).losses())
        assert logs[0] == logs[1]

    def test_loss_decreases_on_clean_data(self):
        x, y = self._data(n=8)
        dan = _dan(dtype=np.float32)
        log_ = train(dan, x, y, OptimizerState(lr=0.05, max_iters=60, batch=4), TrainConfig(la_warmup=1.0))
        assert np.mean(log_.losses()[-10:]) < np.mean(log_.losses()[:10])

    def test_log_columns_and_csv(self, tmp_path):
        x, y = self._data()
        path = tmp_path / "log.csv"
        log_ = train(_dan(), x, y, OptimizerState(max_iters=3, batch=2), TrainConfig(eval_every=2, log_path=path),
                     val=(x[:2], y[:2]))
        assert path.read_text().splitlines()[0] == "iter,loss,mean_gate_site1,mean_gate_site2,mean_gate_site3,mean_gate_site4,val_dice"
        assert len(log_.val_dice()) == 2
        assert 0 < log_.rows[0]["mean_gate_site1"] < 1

    def test_warmup_disables_la_then_restores(self):
        x, y = self._data()
        dan = _dan()
        log_ = train(dan, x, y, OptimizerState(max_iters=4, batch=2, horizon=10), TrainConfig(la_warmup=0.2))
        gate4 = [r["mean_gate_site4"] for r in log_.rows]
        assert gate4[:2] == [1.0, 1.0] and all(g < 1 for g in gate4[2:])
        assert dan.la_open is False

    def test_non_finite_images_rejected(self):
        x, y = self._data()
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            train(_dan(), x, y, OptimizerState(max_iters=3, batch=6))

    def test_nan_loss_aborts(self, monkeypatch):
        x, y = self._data()
        dan = ablate(_dan(), [])
        monkeypatch.setattr(dan, "compute_loss", lambda p, q, lab: Tensor(np.array(np.nan)))
        with pytest.raises(TrainingError, match="iteration 0"):
            train(dan, x, y, OptimizerState(max_iters=3, batch=6))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(_dan(), np.zeros((0, 1, 8, 8)), np.zeros((0, 8, 8), dtype=int), OptimizerState())


class TestSchedule:
    def test_step_decay(self):
        opt = OptimizerState(lr=0.05, max_iters=2000)
        assert [opt.lr_at(i) for i in (0, 499, 500, 1000, 1999)] == [0.05, 0.05, 0.025, 0.0125, 0.00625]

    def test_horizon_keeps_schedule_when_stopping_early(self):
        opt = OptimizerState(lr=0.05, max_iters=500, horizon=2000)
        assert opt.lr_at(499) == 0.05

    def test_momentum_buffers_mirror_weights(self):
        x, y = _batch(0, n=4)
        dan = _dan()
        opt = OptimizerState(max_iters=2, batch=2)
        train(dan, x, y, opt)
        shapes = {n: p.shape for n, p in dan.parameters()}
        assert all(opt.buffers[n].shape == shapes[n] for n in opt.buffers)


class TestPredict:
    def test_matches_independent_fusion(self):
        x, _ = _batch(8, n=3)
        dan = _dan(seed=2)
        dan.train(False)
        p, q, _ = dan(x)
        want = np.argmax(np.exp(p.data + q.data), axis=1)
        assert np.array_equal(predict(dan, x), want)

    def test_exact_tie_goes_to_class_zero(self):
        dan = _dan()
        for s in (dan.stream_a, dan.stream_b):
            s.layers[-1].weight.data[...] = 0
            s.layers[-1].bias.data[...] = 0.3
        assert not predict(dan, _batch()[0]).any()

    def test_single_sample_shape(self):
        x, _ = _batch()
        assert predict(_dan(), x[0]).shape == (8, 8)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        dan = _dan(seed=5, dtype=np.float32)
        x, y = _batch(1, n=4)
        train(dan, x, y, OptimizerState(max_iters=2, batch=2))
        path = tmp_path / "m.ckpt"
        save_model(dan, path)
        assert path.read_bytes()[:8] == CKPT_MAGIC
        back = load_model(path, ARCH, 2, seed=99, dtype=np.float32)
        for k, v in dan.state_dict().items():
            assert np.array_equal(back.state_dict()[k], v)
        assert np.array_equal(predict(back, x), predict(dan, x))

    def test_layout(self, tmp_path):
        from danlab.dan import save_checkpoint

        path = tmp_path / "one.ckpt"
        save_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        raw = path.read_bytes()
        want = CKPT_MAGIC + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
        want += (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + np.arange(6, dtype="<f4").tobytes()
        assert raw == want

    def test_bad_magic_and_truncation(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_model(_dan(dtype=np.float32), path)
        raw = path.read_bytes()
        (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
        (tmp_path / "short").write_bytes(raw[:-3])
        for name in ("bad", "short"):
            with pytest.raises(ValueError):
                load_checkpoint(tmp_path / name)

    def test_architecture_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_model(_dan(dtype=np.float32), path)
        with pytest.raises((KeyError, ValueError)):
            load_model(path, preset("tiny", 3), 3)

    def test_copies_do_not_share_storage(self):
        dan = _dan()
        other = copy.deepcopy(dan)
        other.stream_a.layers[0].weight.data[...] = 0
        assert dan.stream_a.layers[0].weight.data.any()
