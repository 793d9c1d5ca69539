import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derc import distributions as dist
from derc.distributions import (DirichletParams, LossConfig, LossMode, dirichlet_log_density,
                                loss_combined, loss_dpn, loss_hard, loss_kl, majority_vote,
                                predictive_distribution, soft_label)
from derc.errors import ConfigError, DataError, DomainError
from derc.numerics import RngStream, Tensor, softmax
from derc.numerics.gradcheck import check_function

ANGRY, HAPPY, SAD, NEUTRAL = 0, 1, 2, 3


class TestSoftLabel:
    def test_two_happy_one_sad(self):
        np.testing.assert_allclose(soft_label([HAPPY, HAPPY, SAD]), [0, 2 / 3, 1 / 3, 0, 0])

    def test_unanimous(self):
        np.testing.assert_array_equal(soft_label([NEUTRAL] * 3), [0, 0, 0, 1, 0])

    def test_all_different(self):
        np.testing.assert_allclose(soft_label([ANGRY, HAPPY, SAD]), [1 / 3, 1 / 3, 1 / 3, 0, 0])

    def test_out_of_range(self):
        with pytest.raises(DataError):
            soft_label([0, 5], K=5)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=9), st.randoms(use_true_random=False))
    def test_order_invariant(self, labels, rnd):
        shuffled = list(labels)
        rnd.shuffle(shuffled)
        assert np.array_equal(soft_label(labels), soft_label(shuffled))


class TestMajority:
    @pytest.mark.parametrize("labels, expected", [
        ([HAPPY, HAPPY, SAD], HAPPY),
        ([ANGRY, HAPPY, SAD], None),
        ([HAPPY, HAPPY, SAD, SAD], None),
        ([SAD], None),
        ([SAD, SAD, SAD], SAD),
    ])
    def test_vote(self, labels, expected):
        assert majority_vote(labels, 5) == expected


class TestDirichletDensity:
    def test_uniform_k2(self):
        assert dirichlet_log_density([0.7, 0.3], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)

    def test_two_two(self):
        assert dirichlet_log_density([0.5, 0.5], [2.0, 2.0]) == pytest.approx(math.log(1.5), abs=1e-12)

    def test_uniform_k3(self):
        assert dirichlet_log_density([0.2, 0.5, 0.3], DirichletParams([1, 1, 1])) == pytest.approx(
            math.log(2.0), abs=1e-12)

    def test_boundary_rejected(self):
        with pytest.raises(DomainError):
            dirichlet_log_density([1.0, 0.0], [2.0, 2.0])

    def test_nonpositive_alpha(self):
        with pytest.raises(DomainError):
            DirichletParams([1.0, 0.0])
        with pytest.raises(DomainError):
            dirichlet_log_density([0.5, 0.5], [1.0, -1.0])

    @pytest.mark.parametrize("alpha", [(1.0, 1.0), (2.0, 3.0), (0.5, 0.5)])
    def test_integrates_to_one(self, alpha):
        # 1e5 trapezoid points on [1e-6, 1 - 1e-6]
        x = np.linspace(1e-6, 1 - 1e-6, 100_000)
        mu = np.stack([x, 1 - x], axis=-1)
        dens = np.exp(dirichlet_log_density(mu, np.array(alpha)))
        assert abs(np.trapezoid(dens, x) - 1.0) < 1e-3

    def test_alpha0(self):
        assert DirichletParams([0.5, 1.5, 2.0]).alpha0 == pytest.approx(4.0, abs=1e-12)


class TestPredictive:
    def test_uniform(self):
        np.testing.assert_allclose(predictive_distribution(np.ones(5)), np.full(5, 0.2))

    def test_ratio(self):
        np.testing.assert_allclose(predictive_distribution([2.0, 1.0, 1.0]), [0.5, 0.25, 0.25])

    def test_matches_softmax_of_logits(self):
        rng = RngStream(7)
        z = rng.uniform(-10.0, 10.0, size=(10_000, 5))
        got = predictive_distribution(np.exp(z))
        want = softmax(z, axis=-1).data
        assert np.max(np.abs(got - want)) < 1e-12


class TestLossDpn:
    def test_uniform_k2_any_labels(self):
        for labels in ([0], [1], [0, 1, 1]):
            assert loss_dpn(np.zeros(2), labels).item() == pytest.approx(0.0, abs=1e-12)

    def test_worked_value(self):
        got = loss_dpn(np.log([2.0, 2.0]), [1], smoothing_eps=0.02).item()
        assert got == pytest.approx(-math.log(6 * 0.99 * 0.01), abs=1e-12)
        assert got == pytest.approx(2.82346, abs=1e-5)

    def test_gradient(self):
        rng = RngStream(3)
        for _ in range(10):
            z = rng.uniform(-1.5, 1.5, size=5)
            labels = [int(v) for v in rng.integers(0, 5, size=3)]
            assert check_function(lambda ts: loss_dpn(ts[0], labels), [z]) < 1e-5


class TestLossKl:
    def test_self(self):
        assert loss_kl([0.5, 0.5], [0.5, 0.5]).item() == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_soft(self):
        assert loss_kl([0.5, 0.5], [1.0, 0.0]).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_nonnegative_and_zero_only_at_equality(self):
        rng = RngStream(5)
        for _ in range(2000):
            pred = rng.dirichlet(np.ones(5))
            soft = soft_label([int(v) for v in rng.integers(0, 5, size=3)])
            kl = loss_kl(pred, soft).item()
            assert kl >= 0.0
            if kl <= 1e-9:
                np.testing.assert_allclose(pred, soft, atol=1e-4)
            assert abs(loss_kl(np.clip(soft, 1e-300, None), soft).item()) < 1e-9
        p = np.array([0.2, 0.3, 0.5])
        assert abs(loss_kl(p, p).item()) < 1e-9


class TestLossHard:
    def test_uniform(self):
        assert loss_hard(np.full(5, 0.2), ANGRY).item() == pytest.approx(math.log(5.0), abs=1e-12)

    def test_no_majority_is_zero_with_zero_grad(self):
        p = Tensor(np.full(5, 0.2), requires_grad=True)
        out = loss_hard(p, None)
        assert out.item() == 0.0
        out.backward()
        assert np.array_equal(p.grad, np.zeros(5))

    def test_perfect(self):
        assert loss_hard(np.array([1.0, 0.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-12)


class TestCombined:
    def test_lambda_zero(self):
        z = np.array([0.3, -0.2, 1.1, 0.0, -0.7])
        labels = [1, 1, 2]
        cfg = LossConfig(mode=LossMode.DPN_KL, lam=0.0)
        assert loss_combined(z, labels, soft_label(labels), cfg).item() == loss_dpn(z, labels).item()

    def test_trivial_composition(self):
        cfg = LossConfig(lam=20.0)
        assert loss_combined(np.zeros(2), [0, 1], [0.5, 0.5], cfg).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_sum(self):
        rng = RngStream(9)
        cfg = LossConfig()
        for _ in range(50):
            z = rng.uniform(-2, 2, size=5)
            labels = [int(v) for v in rng.integers(0, 5, size=3)]
            soft = soft_label(labels)
            want = loss_dpn(z, labels).item() + 20.0 * loss_kl(softmax(z).data, soft).item()
            assert loss_combined(z, labels, soft, cfg).item() == pytest.approx(want, abs=1e-12)

    def test_wrong_mode(self):
        with pytest.raises(ConfigError):
            loss_combined(np.zeros(2), [0], [1.0, 0.0], LossConfig(mode="HARD"))


class TestConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.mode, cfg.lam, cfg.smoothing_eps) == (LossMode.DPN_KL, 20.0, 0.01)

    @pytest.mark.parametrize("kwargs", [{"lam": -1.0}, {"smoothing_eps": 0.0}, {"smoothing_eps": 0.5},
                                        {"mode": "CE"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            LossConfig(**kwargs)

    def test_parse_dash(self):
        assert LossMode.parse("dpn-kl") is LossMode.DPN_KL


def test_check_distribution_message():
    with pytest.raises(DataError, match="normalization"):
        dist.check_distribution([0.5, 0.6])
