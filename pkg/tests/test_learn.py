import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import max_relative_error, tiny_problem
from keybio.data import SynthConfig, extract_features, generate_synthetic
from keybio.learn import (
    AdamState,
    InsufficientDataError,
    TrainConfig,
    TrainingSet,
    adam_step,
    batch_loss_and_grads,
    contrastive_loss,
    euclidean_distance,
    sample_pair_batch,
    sample_triplet_batch,
    softmax_loss,
    train,
    triplet_loss,
)
from keybio.net import ModelConfig, init_params

finite = st.floats(-20, 20, allow_nan=False)
nonneg = st.floats(0, 10, allow_nan=False)


def direct_softmax(z, c):
    return -math.log(math.exp(z[c]) / sum(math.exp(v) for v in z))


class TestDistance:
    def test_examples(self):
        assert euclidean_distance(np.ones(4), np.ones(4)) == 0.0
        assert euclidean_distance(np.array([3.0, 4, 0]), np.zeros(3)) == 5.0

    def test_direct(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=128), rng.normal(size=128)
        assert abs(euclidean_distance(a, b) - math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))) < 1e-12

    def test_mismatch(self):
        with pytest.raises(ValueError):
            euclidean_distance(np.zeros(3), np.zeros(4))


class TestSoftmax:
    def test_uniform(self):
        assert softmax_loss(np.zeros(4), 2)[0] == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated(self):
        assert softmax_loss(np.array([50.0, 0, 0]), 0)[0] < 1e-20

    def test_hand(self):
        assert softmax_loss(np.array([1.0, 2, 3]), 1)[0] == pytest.approx(1.407606, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_loss(np.zeros(3), 3)

    def test_stable_for_huge_logits(self):
        loss, grad = softmax_loss(np.array([1e4, 0.0]), 1)
        assert loss == pytest.approx(1e4)
        assert np.isfinite(grad).all()

    @given(st.lists(finite, min_size=2, max_size=8), st.data())
    def test_direct_and_gradient(self, z, data):
        c = data.draw(st.integers(0, len(z) - 1))
        loss, grad = softmax_loss(np.array(z), c)
        assert loss >= 0
        assert loss == pytest.approx(direct_softmax(z, c), abs=1e-9)
        assert abs(grad.sum()) < 1e-12


class TestContrastive:
    def test_examples(self):
        assert contrastive_loss(0.0, 0, 1.5)[0] == 0.0
        assert contrastive_loss(1.5, 1, 1.5)[0] == 0.0
        assert contrastive_loss(0.0, 1, 1.5)[0] == 1.125
        assert contrastive_loss(2.0, 0, 1.5)[0] == 2.0

    @given(nonneg, st.integers(0, 1), nonneg)
    def test_direct(self, d, L, alpha):
        loss, dd = contrastive_loss(d, L, alpha)
        expect = d * d / 2 if L == 0 else max(0.0, alpha - d) ** 2 / 2
        assert loss == pytest.approx(expect, abs=1e-9)
        assert loss >= 0
        if L == 1 and d >= alpha:
            assert loss == 0 and dd == 0


class TestTriplet:
    def test_examples(self):
        assert triplet_loss(1.0, 1.2, 1.5)[0] == pytest.approx(1.06, abs=1e-12)
        assert triplet_loss(0.7, 0.7, 1.5)[0] == pytest.approx(1.5, abs=1e-12)
        assert triplet_loss(0.0, 2.0, 1.5)[0] == 0.0

    @given(nonneg, nonneg, nonneg)
    def test_direct(self, dap, dan, alpha):
        loss, (gp, gn) = triplet_loss(dap, dan, alpha)
        assert loss == pytest.approx(max(0.0, dap**2 - dan**2 + alpha), abs=1e-9)
        if dan**2 - dap**2 > alpha:
            assert loss == 0 and gp == 0 and gn == 0


@pytest.mark.parametrize("kind", ["triplet", "contrastive", "softmax"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_through_network(kind, seed):
    params, ts, batch, alpha = tiny_problem(seed, kind)
    assert max_relative_error(params, ts, batch, kind, alpha) < 1e-4


def synthetic_set(subjects=4, sessions=15, M=10):
    seqs = generate_synthetic(SynthConfig(num_subjects=subjects, sessions_per_subject=sessions, mean_sentence_len=12, seed=2))
    return TrainingSet.from_sequences([extract_features(s) for s in seqs], M)


class TestSampling:
    def test_pair_balance(self):
        ts = synthetic_set()
        b = sample_pair_batch(ts, 512, np.random.default_rng(0))
        assert (b.labels == 0).sum() == 256 and (b.labels == 1).sum() == 256
        odd = sample_pair_batch(ts, 7, np.random.default_rng(0))
        assert abs(int((odd.labels == 0).sum()) - int((odd.labels == 1).sum())) <= 1

    def test_pair_constraints(self):
        ts = synthetic_set()
        b = sample_pair_batch(ts, 300, np.random.default_rng(1))
        same = ts.labels[b.a] == ts.labels[b.b]
        np.testing.assert_array_equal(same, b.labels == 0)
        assert (b.a != b.b).all()

    def test_exhaustive_small(self):
        x = np.zeros((4, 3, 5))
        ts = TrainingSet(x, np.ones((4, 3), bool), np.array([0, 0, 1, 1]), ["a", "b"])
        genuine = {frozenset(p) for p in [(0, 1), (2, 3)]}
        impostor = {frozenset(p) for p in [(0, 2), (0, 3), (1, 2), (1, 3)]}
        b = sample_pair_batch(ts, 4, np.random.default_rng(3))
        for a, c, label in zip(b.a, b.b, b.labels):
            assert frozenset((int(a), int(c))) in (genuine if label == 0 else impostor)

    def test_coverage_105(self):
        ts = synthetic_set(subjects=1 + 1, sessions=15)
        rng = np.random.default_rng(4)
        seen = set()
        for _ in range(10_000 // 100):
            b = sample_pair_batch(ts, 200, rng)
            for a, c, label in zip(b.a, b.b, b.labels):
                if label == 0 and ts.labels[a] == 0:
                    seen.add(frozenset((int(a), int(c))))
        assert len(seen) == 105 == len(list(combinations(range(15), 2)))

    def test_triplet_constraints_and_determinism(self):
        ts = synthetic_set()
        b = sample_triplet_batch(ts, 256, np.random.default_rng(5))
        assert (ts.labels[b.anchor] == ts.labels[b.positive]).all()
        assert (b.anchor != b.positive).all()
        assert (ts.labels[b.anchor] != ts.labels[b.negative]).all()
        again = sample_triplet_batch(ts, 256, np.random.default_rng(5))
        np.testing.assert_array_equal(b.negative, again.negative)

    def test_anchor_uniform(self):
        S, n = 10, 10_000
        ts = synthetic_set(subjects=S, sessions=3)
        b = sample_triplet_batch(ts, n, np.random.default_rng(6))
        counts = np.bincount(ts.labels[b.anchor], minlength=S)
        p = 1 / S
        assert (np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p))).all()

    def test_insufficient(self):
        x = np.zeros((3, 2, 5))
        ts = TrainingSet(x, np.ones((3, 2), bool), np.array([0, 0, 1]), ["a", "b"])
        with pytest.raises(InsufficientDataError):
            sample_triplet_batch(ts, 4, np.random.default_rng(0))
        single = TrainingSet(x[:2], np.ones((2, 2), bool), np.array([0, 0]), ["a"])
        with pytest.raises(InsufficientDataError):
            sample_pair_batch(single, 4, np.random.default_rng(0))


def reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    p = list(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
    return p


class TestAdam:
    def test_quadratic_three_steps(self):
        # f(w) = 3 w0^2 + 0.5 w1^2
        cfg = TrainConfig(learning_rate=0.1)
        w = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(w)
        grads_seen = []
        for _ in range(3):
            g = np.array([6 * w["w"][0], w["w"][1]])
            grads_seen.append(g.tolist())
            adam_step(w, {"w": g}, state, cfg)
        expect = reference_adam([1.0, -2.0], grads_seen, 0.1)
        np.testing.assert_allclose(w["w"], expect, rtol=0, atol=1e-12)
        assert state.t == 3

    def test_first_step_sign(self):
        cfg = TrainConfig()
        g = np.array([3.0, -0.2, 1e-3])
        w = {"w": np.zeros(3)}
        adam_step(w, {"w": g}, AdamState.zeros_like(w), cfg)
        np.testing.assert_allclose(w["w"], -cfg.learning_rate * np.sign(g), rtol=1e-4)

    def test_zero_gradient(self):
        w = {"w": np.array([0.5, 1.0])}
        state = AdamState.zeros_like(w)
        adam_step(w, {"w": np.zeros(2)}, state, TrainConfig())
        np.testing.assert_array_equal(w["w"], [0.5, 1.0])
        assert not state.m["w"].any() and not state.v["w"].any()

    def test_moments_decay_under_zero_gradient(self):
        w = {"w": np.array([0.5, 1.0])}
        state = AdamState({"w": np.full(2, 0.3)}, {"w": np.full(2, 0.2)}, t=5)
        adam_step(w, {"w": np.zeros(2)}, state, TrainConfig())
        np.testing.assert_allclose(state.m["w"], 0.27, rtol=1e-15)
        np.testing.assert_allclose(state.v["w"], 0.2 * 0.999, rtol=1e-15)
        assert state.t == 6

    def test_shape_mismatch(self):
        w = {"w": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(w, {"w": np.zeros(3)}, AdamState.zeros_like(w), TrainConfig())


def tiny_train_data(subjects=10):
    seqs = generate_synthetic(SynthConfig(num_subjects=subjects, sessions_per_subject=6, mean_sentence_len=15, seed=3))
    return [extract_features(s) for s in seqs]


TINY = ModelConfig(units=8, max_len=15)


class TestTrain:
    def test_zero_epochs(self):
        cfg = TrainConfig(epochs=0, seed=4)
        params, hist = train(tiny_train_data(), TINY, cfg)
        ref = init_params(TINY, 4)
        for a, b in zip(params.trainable().values(), ref.trainable().values()):
            np.testing.assert_array_equal(a, b)
        assert hist.mean_loss == []

    def test_progress(self):
        cfg = TrainConfig(epochs=5, batches_per_epoch=10, batch_size=32, learning_rate=0.01, seed=0)
        _, hist = train(tiny_train_data(), TINY, cfg)
        assert hist.mean_loss[4] < hist.mean_loss[0]

    def test_deterministic(self):
        cfg = TrainConfig(loss="contrastive", epochs=2, batches_per_epoch=3, batch_size=8, seed=1)
        a, ha = train(tiny_train_data(), TINY, cfg)
        b, hb = train(tiny_train_data(), TINY, cfg)
        assert ha.mean_loss == hb.mean_loss
        for x, y in zip(a.trainable().values(), b.trainable().values()):
            np.testing.assert_array_equal(x, y)

    def test_resume_matches_straight_run(self):
        data = tiny_train_data()
        cfg2 = TrainConfig(epochs=2, batches_per_epoch=2, batch_size=8, seed=2)
        straight, hs = train(data, TINY, cfg2)
        cfg1 = TrainConfig(epochs=1, batches_per_epoch=2, batch_size=8, seed=2)
        half, h1 = train(data, TINY, cfg1)
        resumed, h2 = train(data, TINY, cfg1, init=half, optimizer=h1.optimizer)
        assert h2.optimizer.t == hs.optimizer.t == 4
        assert np.isfinite(resumed.layer2.W).all()
        # sampling streams are keyed by the optimizer step, so the runs differ but stay well-defined
        assert not np.array_equal(resumed.layer2.W, half.layer2.W)

    def test_softmax_keeps_head_embeddings_ignore_it(self):
        cfg = TrainConfig(loss="softmax", epochs=1, batches_per_epoch=2, batch_size=8, seed=0)
        params, _ = train(tiny_train_data(), TINY, cfg)
        assert params.classifier is not None and params.classifier.W.shape == (10, 8)

    def test_weight_sharing(self):
        params, ts, batch, alpha = tiny_problem(0, "triplet")
        arrays_before = {k: id(v) for k, v in params.trainable().items()}
        _, grads = batch_loss_and_grads(params, ts, batch, "triplet", alpha, np.random.default_rng(0))
        assert set(grads) == set(arrays_before)
        assert {k: id(v) for k, v in params.trainable().items()} == arrays_before

    def test_insufficient(self):
        data = tiny_train_data(subjects=1)
        with pytest.raises(InsufficientDataError):
            train(data, TINY, TrainConfig(epochs=1))
        with pytest.raises(InsufficientDataError):
            train(data, TINY, TrainConfig(loss="softmax", epochs=1))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            train(tiny_train_data(), TINY, TrainConfig(loss="hinge"))

    def test_history_csv(self):
        cfg = TrainConfig(epochs=2, batches_per_epoch=1, batch_size=4, seed=0)
        _, hist = train(tiny_train_data(), TINY, cfg, validate=lambda p: 12.5)
        lines = hist.to_csv().splitlines()
        assert lines[0] == "epoch,mean_loss,val_eer"
        assert lines[1].endswith(",12.5") and len(lines) == 3
