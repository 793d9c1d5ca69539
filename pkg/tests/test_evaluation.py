import math

import numpy as np
import pytest

from derc.corpus import Dialogue, GeneratorConfig, Utterance, generate
from derc.distributions import LossConfig, LossMode
from derc.errors import MetricUndefinedError, UsageError
from derc.evaluation import (ScoredUtterance, aupr, average_precision, build_report, entropy, entropy_trace,
                             kl_to_truth, max_prob, pr_curve, score_utterances, wa_ua)
from derc.model import ModelConfig
from derc.numerics import RngStream
from derc.training import OptimConfig, Schedule, train


def scored(pos, neg):
    items = [ScoredUtterance(f"p{i}", np.zeros(1), s, True) for i, s in enumerate(pos)]
    items += [ScoredUtterance(f"n{i}", np.zeros(1), s, False) for i, s in enumerate(neg)]
    return items


def brute_force_ap(scores, flags):
    """Sweep every distinct threshold t (high to low), predicting positive iff score >= t."""
    n_pos = sum(flags)
    area, prev = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, f in zip(scores, flags) if s >= t and f)
        fp = sum(1 for s, f in zip(scores, flags) if s >= t and not f)
        recall = tp / n_pos
        area += (recall - prev) * (tp / (tp + fp))
        prev = recall
    return area


class TestPointMeasures:
    def test_entropy(self):
        assert entropy(np.full(5, 0.2)) == pytest.approx(math.log(5), abs=1e-12)
        assert entropy([0, 0, 1.0, 0, 0]) == 0.0
        assert entropy([0.5, 0.5, 0, 0, 0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_max_prob(self):
        assert max_prob([0.5, 0.25, 0.25]) == 0.5
        assert max_prob(np.full(5, 0.2)) == 0.2
        assert max_prob([0, 1.0, 0]) == 1.0

    def test_ranges(self):
        rng = RngStream(1)
        for p in rng.dirichlet(np.full(5, 0.3), size=500):
            assert -1e-12 <= entropy(p) <= math.log(5) + 1e-12
            assert 0.2 - 1e-12 <= max_prob(p) <= 1.0

    def test_kl_to_truth(self):
        assert kl_to_truth([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert kl_to_truth([0.5, 0.5], [1.0, 0.0]) == pytest.approx(math.log(2), abs=1e-12)
        rng = RngStream(2)
        for _ in range(200):
            assert kl_to_truth(rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))) >= 0.0


class TestWaUa:
    def test_all_correct(self):
        assert wa_ua([0, 1, 2], [0, 1, 2]) == (1.0, 1.0)

    def test_hand(self):
        wa, ua = wa_ua([0, 0, 1, 1], [0, 0, 0, 1])
        assert wa == 0.75 and ua == pytest.approx((2 / 3 + 1) / 2, abs=1e-12)

    def test_constant_prediction(self):
        assert wa_ua([0, 0, 0, 0], [0, 1, 0, 1]) == (0.5, 0.5)

    def test_balanced_equal(self):
        rng = RngStream(3)
        ref = np.repeat(np.arange(5), 20)
        pred = rng.integers(0, 5, size=100)
        wa, ua = wa_ua(pred, ref)
        assert wa == pytest.approx(ua, abs=1e-12)

    def test_empty(self):
        with pytest.raises(UsageError):
            wa_ua([], [])


class TestPrCurve:
    def test_perfect(self):
        assert pr_curve(scored([0.9, 0.8], [0.3])) == [(0.5, 1.0), (1.0, 1.0), (1.0, 2 / 3)]
        assert aupr(scored([0.9, 0.8], [0.3])) == 1.0

    def test_hand_sweep(self):
        pts = pr_curve(scored([0.9, 0.4], [0.6]))
        assert pts == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
        assert average_precision(pts) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)

    def test_tied_single_group(self):
        assert pr_curve(scored([0.5], [0.5])) == [(1.0, 0.5)]

    def test_single_class(self):
        with pytest.raises(MetricUndefinedError):
            pr_curve(scored([0.3, 0.2], []))
        with pytest.raises(MetricUndefinedError):
            pr_curve(scored([], [0.3]))

    def test_recall_sorted(self):
        rng = RngStream(4)
        s = scored(rng.uniform(size=30), rng.uniform(size=10))
        recalls = [r for r, _ in pr_curve(s)]
        assert recalls == sorted(recalls)

    def test_brute_force_oracle_bit_equal(self):
        rng = RngStream(5)
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            flags = [bool(f) for f in rng.integers(0, 2, size=n)]
            flags[0], flags[1] = True, False
            # a coarse grid forces plenty of ties
            scores = [float(v) for v in rng.integers(0, 6, size=n) / 5.0]
            items = [ScoredUtterance(str(i), np.zeros(1), s, f) for i, (s, f) in enumerate(zip(scores, flags))]
            assert aupr(items) == brute_force_ap(scores, flags)

    def test_monotone_invariance(self):
        rng = RngStream(6)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            flags = [True, False] + [bool(f) for f in rng.integers(0, 2, size=n - 2)]
            scores = rng.uniform(-2, 2, size=n).round(1)
            base = [ScoredUtterance(str(i), np.zeros(1), float(s), f) for i, (s, f) in enumerate(zip(scores, flags))]
            moved = [ScoredUtterance(u.utterance_id, u.prediction, float(math.exp(3 * u.score) + 1), u.is_positive)
                     for u in base]
            assert aupr(base) == aupr(moved)

    def test_complementary_problem(self):
        rng = RngStream(7)
        for _ in range(200):
            n = int(rng.integers(2, 21))
            flags = [True, False] + [bool(f) for f in rng.integers(0, 2, size=n - 2)]
            scores = [float(v) for v in rng.integers(0, 8, size=n)]
            flipped = [ScoredUtterance(str(i), np.zeros(1), -s, not f) for i, (s, f) in enumerate(zip(scores, flags))]
            assert aupr(flipped) == brute_force_ap([-s for s in scores], [not f for f in flags])

    def test_confidence_orientation(self):
        preds = [np.array([0.9, 0.05, 0.05]), np.array([1 / 3] * 3)]
        by_ent = score_utterances(["a", "b"], preds, [True, False], "ent")
        by_max = score_utterances(["a", "b"], preds, [True, False], "maxp")
        assert by_ent[0].score > by_ent[1].score and by_max[0].score > by_max[1].score
        assert aupr(by_ent) == aupr(by_max) == 1.0
        with pytest.raises(UsageError):
            score_utterances(["a"], preds[:1], [True], "median")


def _dialogue(labels_seq, rng, did="d"):
    utts = [Utterance.build(f"{did}_u{i}", "AB"[i % 2], rng.normal(size=4), rng.normal(size=4), labels, 3,
                            true_distribution=np.full(3, 1 / 3))
            for i, labels in enumerate(labels_seq)]
    return Dialogue(did, utts)


class TestReport:
    def test_entropy_trace_constant(self):
        d = _dialogue([[0, 0, 1], [1, 1, 1], [0, 1, 2]], RngStream(0))
        assert [r.entropy for r in entropy_trace(d, np.full((3, 3), 1 / 3))] == pytest.approx([math.log(3)] * 3)
        assert [r.entropy for r in entropy_trace(d, np.eye(3))] == [0.0, 0.0, 0.0]
        assert [r.utterance_id for r in entropy_trace(d, np.eye(3))] == ["d_u0", "d_u1", "d_u2"]

    def test_build_report_oracle_predictions(self):
        rng = RngStream(1)
        d = _dialogue([[0, 0, 1], [1, 1, 1], [0, 1, 2], [2, 2, 0]], rng)
        # a little uniform mass keeps KL finite and preserves both confidence orderings
        soft = 0.99 * np.stack([u.soft_label for u in d.utterances]) + 0.01 / 3
        report = build_report([d], [soft])
        assert report.aupr_ent == 1.0 and report.aupr_maxp == 1.0
        assert report.wa == 1.0 and report.n_majority == 3 and report.n_utterances == 4
        truth = build_report([d], [np.full((4, 3), 1 / 3)])
        assert truth.mean_kl_to_truth == pytest.approx(0.0, abs=1e-15)
        text = report.to_text()
        assert text.startswith("[evaluation]\n") and "aupr_ent = 1.0" in text
        assert report.pr_csv("ent").splitlines()[0] == "recall,precision"
        assert report.trace_csv().splitlines()[0] == "dialogue_id,utterance_id,entropy"


def test_entropy_falls_over_repeated_label_span():
    """Seeded snapshot: a desk-sized DPN-KL model grows more certain as one emotion persists.

    The probe shares the training corpus's generator seed, so both see the same class anchors.
    """
    corpus = generate(GeneratorConfig(dialogues=100)).split("train")
    probe = generate(GeneratorConfig(dialogues=10, test_fraction=0.0, min_len=20, max_len=20,
                                     p_stay=1.0, sharpness=1e6)).dialogues
    optim = OptimConfig(total_updates=500, warmup_updates=50, schedule=Schedule(k=0.999))
    falling = 0
    for seed in (1, 2, 3):
        model = train(corpus, LossConfig(mode=LossMode.DPN_KL), optim, ModelConfig(), RngStream(seed)).model
        traces = []
        for d in probe:
            a = np.stack([u.audio_features for u in d.utterances])
            t = np.stack([u.text_features for u in d.utterances])
            probs, _ = model.predict_dialogue(a, t)
            traces.append([r.entropy for r in entropy_trace(d, probs)])
        mean_trace = np.mean(traces, axis=0)
        falling += np.polyfit(np.arange(len(mean_trace)), mean_trace, 1)[0] <= 0.0
    assert falling >= 2
