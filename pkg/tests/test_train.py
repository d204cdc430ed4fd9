import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlsnn.data import Dataset, synthetic_images
from stlsnn.errors import ConsistencyError, EmptyInputError, RangeError
from stlsnn.layers import LayerKind, LayerParams, LayerSpec
from stlsnn.network import Network, SpikeRecord, network_forward, predict_class
from stlsnn.train import (
    OptimizerState,
    RngStreams,
    TrainConfig,
    build_network,
    class_counts,
    evaluate,
    jdf_evaluate,
    jdf_predict,
    lr_schedule,
    optimizer_step,
    run_eval,
    sample_threshold_indices,
    shuffle_thresholds,
    track_thresholds,
    train_epoch,
)

SPECS = [LayerSpec(LayerKind.DENSE, features=24), LayerSpec(LayerKind.VOTING, classes=4, population=3)]


def toy(n=32, seed=0):
    s = synthetic_images(n, classes=4, shape=(1, 5, 5), seed=seed)
    return Dataset(s.pixels, s.labels)


def cfg(**kw):
    base = dict(T=4, batch_size=8, epochs=2, eta0=0.01, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def copy_net(C):
    specs = [LayerSpec(LayerKind.VOTING, classes=C, population=1)]
    return Network(specs, (C,), params=[LayerParams(W=2 * np.eye(C), v_th=np.ones(C))])


class TestSchedule:
    def test_values(self):
        assert lr_schedule(0.001, 0.93, 0) == 0.001
        assert lr_schedule(0.001, 0.93, 2) == pytest.approx(0.00086490, abs=1e-10)
        assert all(lr_schedule(0.01, 1.0, e) == 0.01 for e in range(10))

    def test_negative_epoch(self):
        with pytest.raises(RangeError):
            lr_schedule(0.1, 0.9, -1)

    @given(st.floats(1e-5, 1.0), st.one_of(st.floats(0.01, 0.999), st.just(1.0)), st.integers(0, 50))
    def test_strictly_decreasing_iff_gamma_below_one(self, eta, gamma, e):
        a, b = lr_schedule(eta, gamma, e), lr_schedule(eta, gamma, e + 1)
        assert (b < a) == (gamma < 1)


class TestAdam:
    def test_zero_grads(self):
        p = {"a": np.array([1.0, -2.0])}
        st_ = OptimizerState()
        for _ in range(2):
            optimizer_step(p, {"a": np.zeros(2)}, st_, 0.1)
        assert p["a"].tolist() == [1.0, -2.0] and st_.step == 2

    def test_first_step_magnitude(self):
        p = {"a": np.array([0.0])}
        optimizer_step(p, {"a": np.array([1.0])}, OptimizerState(), 0.1)
        assert p["a"][0] == pytest.approx(-0.1 * 1 / (1 + 1e-8))

    def test_shape_mismatch(self):
        with pytest.raises(ConsistencyError):
            optimizer_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, OptimizerState(), 0.1)

    def test_frozen_skipped(self):
        p = {"0.W": np.zeros(1), "0.v_th": np.zeros(1)}
        g = {"0.W": np.ones(1), "0.v_th": np.ones(1)}
        optimizer_step(p, g, OptimizerState(), 0.1, mode="sl")
        assert p["0.v_th"][0] == 0 and p["0.W"][0] < 0


class TestTrainEpoch:
    def test_zero_lr_is_noop(self):
        c = cfg(eta0=0.0)
        net = build_network(SPECS, (1, 5, 5), c)
        before = {k: v.copy() for k, v in net.parameters().items()}
        train_epoch(net, toy(), c, OptimizerState(), RngStreams(0))
        assert all(np.array_equal(before[k], v) for k, v in net.parameters().items())

    def test_already_perfect(self):
        net = copy_net(3)
        data = Dataset(np.eye(3)[[1]], np.array([1]), "direct")
        before = {k: v.copy() for k, v in net.parameters().items()}
        _, rec = train_epoch(net, data, cfg(batch_size=1), OptimizerState(), RngStreams(0))
        assert rec.loss == 0 and rec.top1 == 1
        assert all(np.array_equal(before[k], v) for k, v in net.parameters().items())

    def test_loss_decreases_on_toy_set(self):
        wins = 0
        for seed in range(5):
            c = cfg(seed=seed)
            net = build_network(SPECS, (1, 5, 5), c)
            opt, rngs = OptimizerState(), RngStreams(seed)
            l0 = train_epoch(net, toy(), c, opt, rngs, 0)[1].loss
            l1 = train_epoch(net, toy(), c, opt, rngs, 1)[1].loss
            wins += l1 <= l0
        assert wins >= 4

    def test_deterministic(self):
        out = []
        for _ in range(2):
            c = cfg()
            net = build_network(SPECS, (1, 5, 5), c)
            _, rec = train_epoch(net, toy(), c, OptimizerState(), RngStreams(0))
            out.append((rec, net.named_tensors()))
        assert out[0][0] == out[1][0]
        assert all(np.array_equal(out[0][1][k], out[1][1][k]) for k in out[0][1])

    @pytest.mark.parametrize("mode,frozen", [("sl", "v_th"), ("tl", "W")])
    def test_degenerate_modes(self, mode, frozen):
        c = cfg(mode=mode)
        net = build_network(SPECS, (1, 5, 5), c)
        before = {k: v.copy() for k, v in net.parameters().items()}
        opt, rngs = OptimizerState(), RngStreams(0)
        for e in range(2):
            train_epoch(net, toy(), c, opt, rngs, e)
        for k, v in net.parameters().items():
            if k.endswith(frozen):
                assert np.array_equal(before[k], v)
            else:
                assert not np.array_equal(before[k], v)

    def test_empty(self):
        c = cfg()
        with pytest.raises(EmptyInputError):
            train_epoch(build_network(SPECS, (1, 5, 5), c), toy().subset([]), c, OptimizerState(), RngStreams(0))


class TestEvaluate:
    def test_silent_net(self):
        c = cfg()
        net = build_network(SPECS, (1, 5, 5), c, v_th_init=1e9)
        data = toy(40)
        top1, afr = evaluate(net, data, c)
        assert afr == 0 and top1 == pytest.approx((data.labels == 0).mean())

    def test_copy_net(self):
        data = Dataset(np.eye(3)[[0, 1, 2, 1]], np.array([0, 1, 2, 1]), "direct")
        top1, afr = evaluate(copy_net(3), data, cfg())
        assert top1 == 1 and afr == pytest.approx(1 / 3)

    def test_afr_recount(self):
        c = cfg()
        net = build_network(SPECS, (1, 5, 5), c)
        data = toy(20)
        _, afr = evaluate(net, data, c, batch_size=7)
        enc = np.random.default_rng(2023)
        spikes = 0
        for start in range(0, 20, 7):
            x = data.window(np.arange(start, min(20, start + 7)), c.T, enc)
            _, cache = network_forward(x, net, mode="eval")
            spikes += sum(int(o.sum()) for o in cache.spikes())
        brute = spikes / (net.total_units * c.T * 20)
        assert abs(afr - brute) <= 1e-12 * max(brute, 1e-300)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            evaluate(copy_net(2), Dataset(np.zeros((0, 2)), np.zeros(0, int), "direct"), cfg())


class TestThresholds:
    def test_fresh(self):
        net = build_network(SPECS, (1, 5, 5), cfg())
        for snap in track_thresholds(net, sample_threshold_indices(net, 5)):
            assert np.all(snap["values"] == 2.0) and snap["std"] == 0
            assert snap["hist"].sum() == len(net.params[snap["layer"]].v_th)

    def test_histogram_partition(self, rng):
        net = build_network(SPECS, (1, 5, 5), cfg())
        for p in net.params:
            p.v_th = rng.normal(2, 0.3, p.v_th.shape)
        for snap, v in zip(track_thresholds(net), net.thresholds()):
            assert len(snap["hist"]) == 50 and snap["hist"].sum() == v.size
            assert snap["edges"][0] == v.min() and snap["edges"][-1] == v.max()

    def test_bad_index(self):
        net = build_network(SPECS, (1, 5, 5), cfg())
        with pytest.raises(RangeError):
            track_thresholds(net, [[0, 999], [0]])

    def test_sl_training_keeps_snapshot(self):
        c = cfg(mode="sl")
        net = build_network(SPECS, (1, 5, 5), c)
        before = track_thresholds(net)
        train_epoch(net, toy(), c, OptimizerState(), RngStreams(0))
        after = track_thresholds(net)
        assert all(np.array_equal(a["values"], b["values"]) for a, b in zip(before, after))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_shuffle_preserves_multiset(self, seed):
        rng = np.random.default_rng(seed)
        net = build_network(SPECS, (1, 5, 5), cfg())
        for p in net.params:
            p.v_th = rng.normal(2, 0.3, p.v_th.shape)
        out = shuffle_thresholds(net, seed)
        for a, b in zip(net.thresholds(), out.thresholds()):
            assert np.array_equal(np.sort(a), np.sort(b))
        for a, b in zip(net.params, out.params):
            assert np.array_equal(a.W, b.W)
        again = shuffle_thresholds(net, seed)
        assert all(np.array_equal(a, b) for a, b in zip(out.thresholds(), again.thresholds()))

    def test_shuffle_equal_values(self):
        net = build_network(SPECS, (1, 5, 5), cfg())
        out = shuffle_thresholds(net, 3)
        assert all(np.array_equal(a, b) for a, b in zip(net.thresholds(), out.thresholds()))


class TestJdf:
    def test_single_member(self, rng):
        net = build_network(SPECS, (1, 5, 5), cfg())
        x = (rng.random((4, 10, 1, 5, 5)) < 0.4).astype(float)
        rec, _ = network_forward(x, net, mode="eval")
        assert np.array_equal(jdf_predict([net], x), predict_class(class_counts(rec, 4, 3)))

    def test_identical_pair(self, rng):
        net = build_network(SPECS, (1, 5, 5), cfg())
        x = (rng.random((4, 10, 1, 5, 5)) < 0.4).astype(float)
        assert np.array_equal(jdf_predict([net, net.copy()], x), jdf_predict([net], x))
        assert jdf_evaluate([net, net], toy(), cfg()) == run_eval(net, toy(), cfg()).top1

    def test_hand_tie(self):
        # net 1 counts (5, 3), net 2 counts (2, 4): sums tie at 7 -> class 0
        a = np.zeros((5, 1, 2))
        a[:5, 0, 0] = 1
        a[:3, 0, 1] = 1
        b = np.zeros((5, 1, 2))
        b[:2, 0, 0] = 1
        b[:4, 0, 1] = 1
        total = class_counts(SpikeRecord(a), 2, 1) + class_counts(SpikeRecord(b), 2, 1)
        assert total.tolist() == [[7, 7]] and predict_class(total)[0] == 0

    def test_single_sample_and_raw_image(self, rng):
        c = cfg()
        net = build_network(SPECS, (1, 5, 5), c)
        x = (rng.random((4, 1, 5, 5)) < 0.4).astype(float)
        assert isinstance(jdf_predict([net], x), int)
        assert isinstance(jdf_predict([net], rng.random((1, 5, 5)), c), int)

    def test_mismatch(self):
        other = [LayerSpec(LayerKind.DENSE, features=24), LayerSpec(LayerKind.VOTING, classes=4, population=2)]
        a = build_network(SPECS, (1, 5, 5), cfg())
        b = build_network(other, (1, 5, 5), cfg())
        with pytest.raises(ConsistencyError):
            jdf_predict([a, b], np.zeros((2, 1, 1, 5, 5)))
