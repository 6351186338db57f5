import numpy as np
import pytest

from chansplit import autograd as ag
from chansplit import data, nn
from chansplit.autograd import Tensor
from chansplit.channel import ChannelConfig
from chansplit.optim import AdamState, TrainConfig, adam_step, clip_grad_norm, evaluate, train, train_het
from chansplit.splitmodel import build_het_model, build_split_model


@pytest.fixture(scope="module")
def small_ds():
    return data.split(data.synth_series("ar1", 400, seed=0), N=10)


class TestAdam:
    def test_zero_gradient(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        st = AdamState([w])
        adam_step([w], st, [np.zeros(2)])
        np.testing.assert_array_equal(w.values, [1.0, -2.0])
        assert st.t == 1

    def test_first_step_magnitude(self):
        w = Tensor(np.zeros(3), requires_grad=True)
        st = AdamState([w], lr=1e-3)
        adam_step([w], st, [np.array([0.5, -3.0, 100.0])])
        np.testing.assert_allclose(w.values, [-1e-3, 1e-3, -1e-3], rtol=1e-6)

    def test_quadratic_descent(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        st = AdamState([w], lr=0.01)
        trace = []
        for _ in range(100):
            w.grad = None
            ag.sum(ag.square(w)).backward()
            adam_step([w], st)
            trace.append(abs(w.values[0]))
        tail = np.array(trace[10:])
        assert np.all(np.diff(tail) < 0)
        assert trace[-1] < 0.5

    def test_missing_gradient(self):
        w = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            adam_step([w], AdamState([w]))

    def test_matches_reference_formula(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        st = AdamState([w], lr=0.01)
        ref, m, v = w.values.copy(), np.zeros(4), np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            adam_step([w], st, [g])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w.values, ref, rtol=1e-12)

    def test_clip(self):
        w = Tensor(np.zeros(2), requires_grad=True)
        w.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([w], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(w.grad) == pytest.approx(1.0)


def quick(**kw):
    base = dict(max_epochs=3, patience=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_beats_naive_predictor(self):
        # a mean-reverting AR(1) leaves room between the naive and optimal predictors
        ds = data.split(data.synth_series("ar1", 1500, seed=4, phi=0.5, noise_std=0.1), N=10)
        Xv, yv = ds.val
        naive = float(np.mean((Xv[:, -1, 0] - yv) ** 2))
        model = build_split_model(4, 1, 1, seed=0)
        report = train(model, ds, TrainConfig(max_epochs=60, patience=10, seed=0, lr=5e-3))
        assert report.best_val_mse < naive

    def test_deterministic(self, small_ds):
        reps = []
        for _ in range(2):
            m = build_split_model(4, 1, 1, seed=1)
            reps.append(train(m, small_ds, quick(channel=ChannelConfig.erasure(0.2))))
        assert reps[0] == reps[1]

    def test_report_invariants(self, small_ds):
        m = build_split_model(4, 1, 1, seed=1)
        r = train(m, small_ds, quick(max_epochs=4, patience=10))
        assert r.epochs == len(r.val_mse) == 4
        assert r.best_epoch == int(np.argmin(r.val_mse))
        assert all(np.isfinite(r.train_loss))

    def test_restores_best(self, small_ds):
        m = build_split_model(4, 1, 1, seed=1)
        r = train(m, small_ds, quick(max_epochs=4))
        got = evaluate(m, small_ds.val, ChannelConfig.none())
        assert got == pytest.approx(r.best_val_mse, rel=1e-12)

    def test_lambda_one_freezes_head(self, small_ds):
        m = build_split_model(4, 1, 1, early_exit=True, seed=1)
        before = nn.snapshot(m.ee_head.parameters())
        train(m, small_ds, quick(lam=1.0))
        for a, p in zip(before, m.ee_head.parameters()):
            np.testing.assert_array_equal(a, p.values)

    def test_empty_split(self, small_ds):
        m = build_split_model(4, 1, 1, seed=1)
        X, y = small_ds.train
        with pytest.raises(ValueError, match="empty"):
            train(m, ((X, y), (X[:0], y[:0])), quick())

    def test_divergence_reported(self, small_ds):
        m = build_split_model(4, 1, 1, seed=1)
        r = train(m, small_ds, quick(divergence_threshold=1e-9))
        assert r.diverged_epoch == 0


class TestTrainHet:
    def test_c1_equals_train(self, small_ds):
        a = build_split_model(4, 1, 1, seed=2)
        het = build_het_model(4, (1,), 1, seed=2)
        cfg = quick(channel=ChannelConfig.erasure(0.1))
        r1 = train(a, small_ds, TrainConfig(**{**cfg.__dict__, "batch_size": 32}))
        r2 = train_het(het, [small_ds], TrainConfig(**{**cfg.__dict__, "batch_size": 32}))
        assert r1.train_loss == r2.train_loss and r1.val_mse == r2.val_mse
        for p, q in zip(a.parameters(), het.parameters()):
            assert p.values.tobytes() == q.values.tobytes()

    def test_both_devices_update(self, small_ds):
        het = build_het_model(4, (1, 2), 1, seed=2)
        edge_params = [p for e in het.edges for p in e.parameters()]
        before = nn.snapshot(edge_params)
        train_het(het, [small_ds, small_ds], quick(max_epochs=1))
        for b, p in zip(before, edge_params):
            assert not np.array_equal(b, p.values)

    def test_server_recurrent_weights_inert(self, small_ds):
        # the server sees a one-step sequence from zero state, so W_hh gets no gradient
        het = build_het_model(4, (1, 2), 2, seed=2)
        before = nn.snapshot([l.W_hh for l in het.server.layers])
        train_het(het, [small_ds, small_ds], quick(max_epochs=1))
        for b, l in zip(before, het.server.layers):
            np.testing.assert_array_equal(b, l.W_hh.values)

    def test_needs_devices(self, small_ds):
        het = build_het_model(4, (1, 2), 1, seed=2)
        with pytest.raises(ValueError):
            train_het(het, [], quick())


class TestEvaluate:
    def test_p0_equals_none(self, small_ds):
        m = build_split_model(4, 1, 1, seed=3)
        a = evaluate(m, small_ds.test, ChannelConfig.none())
        b = evaluate(m, small_ds.test, ChannelConfig.erasure(0.0), np.random.default_rng(1))
        assert a == b

    def test_none_matches_direct_pass(self, small_ds):
        from chansplit.splitmodel import split_forward
        from chansplit.channel import ChannelLayer
        m = build_split_model(4, 1, 1, seed=3)
        X, y = small_ds.test
        with ag.no_grad():
            y_hat, _ = split_forward(m, X, ChannelLayer(ChannelConfig.none(), None))
        assert evaluate(m, small_ds.test, ChannelConfig.none()) == pytest.approx(np.mean((y_hat.values - y) ** 2), rel=1e-12)

    def test_variance_shrinks_with_repeats(self, small_ds):
        m = build_split_model(4, 1, 1, seed=3)
        X, y = small_ds.test
        sub = (X[:40], y[:40])
        ch = ChannelConfig.erasure(0.5)
        one = [evaluate(m, sub, ch, np.random.default_rng(s), repeats=1) for s in range(30)]
        many = [evaluate(m, sub, ch, np.random.default_rng(100 + s), repeats=100) for s in range(30)]
        assert np.var(many) < np.var(one) / 10

    def test_side_effect_free(self, small_ds):
        m = build_split_model(4, 1, 1, early_exit=True, seed=3)
        before = nn.snapshot(m.parameters())
        evaluate(m, small_ds.test, ChannelConfig.awgn2(0.0, 2, 2), repeats=3)
        evaluate(m, small_ds.test, ChannelConfig.none(), branch="early_exit")
        for b, p in zip(before, m.parameters()):
            assert b.tobytes() == p.values.tobytes()
            assert p.grad is None

    def test_het_device(self, small_ds):
        het = build_het_model(4, (1, 2), 1, seed=3)
        a = evaluate(het, small_ds.test, ChannelConfig.none(), device=0)
        b = evaluate(het, small_ds.test, ChannelConfig.none(), device=1)
        assert a != b
