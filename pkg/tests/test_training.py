import numpy as np
import pytest

from derc.corpus import Dialogue, GeneratorConfig, Utterance, generate
from derc.distributions import LossConfig, LossMode, dpn_terms
from derc.errors import ConfigError, DataError, DivergenceError
from derc.model import ModelConfig
from derc.numerics import RngStream
from derc.training import (Adam, OptimConfig, Schedule, batch_loss, bucket_batches, learning_rate,
                           make_batch, scheduled_input, teacher_forcing_ratio, train)

TINY = ModelConfig(model_dim=16, encoder_blocks=1, decoder_blocks=1, heads=2, feature_dim=8,
                   fusion_rank=8, fusion_dim=16, dropout=0.1)


@pytest.fixture(scope="module")
def toy():
    cfg = GeneratorConfig(dialogues=20, test_fraction=0.0, min_len=4, max_len=10, feature_dim=8, seed=3)
    return generate(cfg).dialogues


class TestSchedules:
    def test_exponential(self):
        assert teacher_forcing_ratio(0, Schedule(k=0.9995)) == 1.0
        assert teacher_forcing_ratio(2, Schedule(k=0.5)) == 0.25

    def test_inverse_sigmoid(self):
        assert teacher_forcing_ratio(0, Schedule("inverse_sigmoid", c=100.0)) == pytest.approx(100 / 101, abs=1e-12)
        assert teacher_forcing_ratio(10**7, Schedule("inverse_sigmoid", c=100.0)) == 0.0

    def test_linear(self):
        s = Schedule("linear", a=1.0, b=0.01)
        assert teacher_forcing_ratio(50, s) == pytest.approx(0.5)
        assert teacher_forcing_ratio(500, s) == 0.0
        assert teacher_forcing_ratio(0, Schedule("linear", a=2.0, b=0.1)) == 1.0

    @pytest.mark.parametrize("schedule", [Schedule(k=0.999), Schedule("linear", a=1.2, b=3e-4),
                                          Schedule("inverse_sigmoid", c=50.0)])
    def test_non_increasing(self, schedule):
        eps = [teacher_forcing_ratio(i, schedule) for i in range(20_000)]
        assert all(0.0 <= e <= 1.0 for e in eps)
        assert all(b <= a for a, b in zip(eps, eps[1:]))

    @pytest.mark.parametrize("kw", [{"kind": "cosine"}, {"k": 0.0}, {"k": 1.5},
                                    {"kind": "inverse_sigmoid", "c": 0.5}, {"kind": "linear", "b": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            Schedule(**kw)


class TestScheduledInput:
    GT = np.array([1.0, 0.0])
    PRED = np.array([0.3, 0.7])

    def test_always_truth(self):
        rng = RngStream(0)
        assert all(scheduled_input(self.GT, self.PRED, 1.0, rng) is self.GT for _ in range(1000))

    def test_always_prediction(self):
        rng = RngStream(0)
        assert all(np.array_equal(scheduled_input(self.GT, self.PRED, 0.0, rng), self.PRED) for _ in range(1000))

    @pytest.mark.parametrize("eps", [0.3, 0.7])
    def test_frequency(self, eps):
        rng = RngStream(42)
        hits = sum(scheduled_input(self.GT, self.PRED, eps, rng) is self.GT for _ in range(10_000))
        assert abs(hits / 10_000 - eps) <= 0.02

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            scheduled_input(self.GT, self.PRED, 1.5, RngStream(0))


class TestLearningRate:
    def test_shape(self):
        cfg = OptimConfig(peak_lr=1e-3, warmup_updates=10, total_updates=110)
        lrs = [learning_rate(u, cfg) for u in range(111)]
        assert lrs[0] == 0.0 and lrs[10] == pytest.approx(1e-3) and lrs[110] == 0.0
        assert all(b >= a for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))
        assert lrs[60] == pytest.approx(5e-4)

    @pytest.mark.parametrize("kw", [{"peak_lr": 0.0}, {"warmup_updates": 1000}, {"batch_size": 0},
                                    {"total_updates": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            OptimConfig(**kw)


def test_adam_first_step_moves_by_lr():
    from derc.numerics import Tensor
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    Adam([p], OptimConfig()).step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


class TestBatching:
    def test_padding_and_targets(self, toy):
        batch = make_batch(toy[:3], 5, LossConfig(mode=LossMode.HARD))
        lengths = [len(d) for d in toy[:3]]
        assert batch.audio.shape[:2] == (3, max(lengths))
        assert batch.valid.sum() == sum(lengths)
        assert np.all(batch.soft[~batch.valid] == 0.0)
        np.testing.assert_array_equal(batch.teacher[batch.has_majority], batch.majority[batch.has_majority])
        np.testing.assert_array_equal(batch.teacher[~batch.has_majority], batch.soft[~batch.has_majority])

    def test_buckets_cover_all_samples(self, toy):
        groups = bucket_batches(toy, 6, RngStream(0))
        ids = sorted(d.dialogue_id for g in groups for d in g)
        assert ids == sorted(d.dialogue_id for d in toy)
        assert all(len(g) <= 6 for g in groups)


def _train(dialogues, mode, updates=30, seed=0, **kw):
    optim = OptimConfig(total_updates=updates, warmup_updates=min(10, updates - 1), batch_size=8,
                        schedule=Schedule(k=0.99))
    return train(dialogues, LossConfig(mode=mode, **kw.pop("loss_kw", {})), optim, TINY, RngStream(seed), **kw)


class TestTrain:
    def test_toy_overfit(self, toy):
        res = _train(toy, LossMode.HARD, updates=200)
        assert res.log[-1].loss < 0.5 * res.log[0].loss

    def test_lambda_zero_equals_pure_dpn(self, toy):
        def pure_dpn(logits, batch, cfg):
            weight = batch.valid.astype(np.float64)
            return (dpn_terms(logits, batch.log_mu_mean) * weight).sum() * (1.0 / max(weight.sum(), 1.0))

        a = _train(toy, LossMode.DPN_KL, loss_kw={"lam": 0.0})
        b = _train(toy, LossMode.DPN_KL, loss_kw={"lam": 0.0}, loss_fn=pure_dpn)
        assert [r.loss for r in a.log] == [r.loss for r in b.log]
        for name, p in a.model.params.items():
            assert np.array_equal(p.data, b.model.params[name].data)

    def test_hard_without_majority_leaves_parameters(self):
        rng = RngStream(1)
        utts = [Utterance.build(f"u{i}", "AB"[i % 2], rng.normal(size=8), rng.normal(size=8), [0, 1, 2], 5)
                for i in range(6)]
        dialogues = [Dialogue("d0", utts), Dialogue("d1", utts[:4])]
        from derc.model import DialogueModel
        model = DialogueModel.init(TINY, RngStream(5))
        before = {k: v.data.copy() for k, v in model.params.items()}
        res = _train(dialogues, LossMode.HARD, updates=5, model=model)
        assert all(r.loss == 0.0 for r in res.log)
        for k, v in res.model.params.items():
            assert np.array_equal(v.data, before[k])

    def test_deterministic(self, toy):
        a = _train(toy[:8], LossMode.DPN_KL, updates=12, seed=4)
        b = _train(toy[:8], LossMode.DPN_KL, updates=12, seed=4)
        assert [r.loss for r in a.log] == [r.loss for r in b.log]
        c = _train(toy[:8], LossMode.DPN_KL, updates=12, seed=5)
        assert [r.loss for r in a.log] != [r.loss for r in c.log]

    def test_log_fields(self, toy):
        res = _train(toy, LossMode.HARD, updates=12)
        assert res.log[-1].updates == 12
        assert [r.epoch for r in res.log] == list(range(1, len(res.log) + 1))
        assert all(0.0 <= r.tf_ratio <= 1.0 for r in res.log)

    def test_divergence(self, toy):
        def nan_loss(logits, batch, cfg):
            return batch_loss(logits, batch, cfg) * float("nan")

        with pytest.raises(DivergenceError, match="update 1"):
            _train(toy, LossMode.SOFT, updates=3, loss_fn=nan_loss)

    def test_empty(self):
        with pytest.raises(DataError):
            _train([], LossMode.SOFT)
