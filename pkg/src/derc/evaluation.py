"""Accuracy, confidence measures, PR curves / AUPR and entropy traces.

AUPR treats utterances with a majority-agreed label as the positive class and
ranks them by model confidence: max probability, or negative entropy.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from derc.corpus import Dialogue
from derc.errors import MetricUndefinedError, UsageError

MEASURES = ("maxp", "ent")


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum()) if nz.size else 0.0


def max_prob(p) -> float:
    return float(np.max(p))


def kl_to_truth(pred, truth) -> float:
    """KL(truth || pred) with 0 ln 0 = 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    nz = truth > 0.0
    return float(np.sum(truth[nz] * (np.log(truth[nz]) - np.log(pred[nz]))))


def wa_ua(predictions: Sequence[int], references: Sequence[int], K: int | None = None) -> tuple[float, float]:
    """Overall accuracy and mean per-class accuracy over classes present in ``references``."""
    pred = np.asarray(predictions)
    ref = np.asarray(references)
    if pred.size == 0 or pred.shape != ref.shape:
        raise UsageError("wa_ua needs equal-length, non-empty prediction and reference lists")
    correct = pred == ref
    wa = float(correct.mean())
    classes = np.unique(ref)
    ua = float(np.mean([correct[ref == k].mean() for k in classes]))
    return wa, ua


@dataclass(frozen=True)
class ScoredUtterance:
    utterance_id: str
    prediction: np.ndarray
    score: float
    is_positive: bool


def confidence(p, measure: str) -> float:
    if measure == "maxp":
        return max_prob(p)
    if measure == "ent":
        return -entropy(p)
    raise UsageError(f"unknown confidence measure {measure!r}; expected one of {MEASURES}")


def score_utterances(ids, predictions, positives, measure: str) -> list[ScoredUtterance]:
    return [ScoredUtterance(u, np.asarray(p), confidence(p, measure), bool(pos))
            for u, p, pos in zip(ids, predictions, positives)]


def _scores_flags(scored) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in scored], dtype=np.float64)
    flags = np.array([s.is_positive for s in scored], dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise UsageError("confidence scores must be finite")
    n_pos = int(flags.sum())
    if n_pos == 0 or n_pos == flags.size:
        raise MetricUndefinedError("PR curve needs at least one positive and one negative utterance")
    return scores, flags


def pr_curve(scored: Sequence[ScoredUtterance]) -> list[tuple[float, float]]:
    """(recall, precision) after each group of equal scores, sweeping from the top score down."""
    scores, flags = _scores_flags(scored)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    f_sorted = flags[order]
    n_pos = int(flags.sum())
    points = []
    tp = fp = 0
    i = 0
    n = s_sorted.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            if f_sorted[j]:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((tp / n_pos, tp / (tp + fp)))
        i = j
    return points


def average_precision(points: Iterable[tuple[float, float]]) -> float:
    """Step-wise area: sum of (R_i - R_{i-1}) * P_i, no interpolation."""
    area = 0.0
    prev = 0.0
    for recall, precision in points:
        area += (recall - prev) * precision
        prev = recall
    return area


def aupr(scored: Sequence[ScoredUtterance]) -> float:
    return average_precision(pr_curve(scored))


# ----------------------------------------------------------------- reports
@dataclass
class TraceRecord:
    dialogue_id: str
    utterance_id: str
    entropy: float
    soft_label: np.ndarray
    prediction: np.ndarray


def entropy_trace(dialogue: Dialogue, predictions) -> list[TraceRecord]:
    """One record per utterance, in dialogue order."""
    predictions = np.asarray(predictions)
    if predictions.shape[0] != len(dialogue):
        raise UsageError("one prediction per utterance is required")
    return [TraceRecord(dialogue.dialogue_id, u.utterance_id, entropy(p), u.soft_label, p)
            for u, p in zip(dialogue.utterances, predictions)]


@dataclass
class EvalReport:
    wa: float
    ua: float
    aupr_maxp: float
    aupr_ent: float
    pr_points: dict[str, list[tuple[float, float]]]
    n_utterances: int
    n_majority: int
    mean_kl_to_truth: float | None = None
    entropy_trace: list[TraceRecord] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "wa": self.wa,
            "ua": self.ua,
            "aupr_maxp": self.aupr_maxp,
            "aupr_ent": self.aupr_ent,
            "mean_kl_to_truth": self.mean_kl_to_truth,
            "n_utterances": self.n_utterances,
            "n_majority": self.n_majority,
            "positive_prevalence": self.n_majority / self.n_utterances if self.n_utterances else None,
        }

    def to_text(self) -> str:
        lines = ["[evaluation]"]
        for key, value in self.summary().items():
            lines.append(f"{key} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    def pr_csv(self, measure: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in self.pr_points[measure]:
            w.writerow([repr(r), repr(p)])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dialogue_id", "utterance_id", "entropy"])
        for rec in self.entropy_trace:
            w.writerow([rec.dialogue_id, rec.utterance_id, repr(rec.entropy)])
        return buf.getvalue()


def build_report(dialogues: Sequence[Dialogue], predictions: Sequence[np.ndarray]) -> EvalReport:
    """Metrics for per-dialogue predicted distributions ``(len(d), K)``."""
    ids, preds, positives, truths, trace = [], [], [], [], []
    ref, hyp = [], []
    for d, p in zip(dialogues, predictions):
        trace.extend(entropy_trace(d, p))
        for u, q in zip(d.utterances, p):
            ids.append(u.utterance_id)
            preds.append(q)
            positives.append(u.majority is not None)
            if u.majority is not None:
                ref.append(u.majority)
                hyp.append(int(np.argmax(q)))
            truths.append(u.true_distribution)
    if not ref:
        raise MetricUndefinedError("no utterance has a majority label; WA/UA undefined")
    wa, ua = wa_ua(hyp, ref)
    points = {m: pr_curve(score_utterances(ids, preds, positives, m)) for m in MEASURES}
    kl = None
    if all(t is not None for t in truths):
        kl = float(np.mean([kl_to_truth(q, t) for q, t in zip(preds, truths)]))
    return EvalReport(
        wa=wa, ua=ua,
        aupr_maxp=average_precision(points["maxp"]),
        aupr_ent=average_precision(points["ent"]),
        pr_points=points,
        n_utterances=len(ids),
        n_majority=len(ref),
        mean_kl_to_truth=kl,
        entropy_trace=trace,
    )


def _predict_batch(model, dialogues: Sequence[Dialogue]) -> list[np.ndarray]:
    T = max(len(d) for d in dialogues)
    Q = dialogues[0].utterances[0].audio_features.size
    audio = np.zeros((len(dialogues), T, Q))
    text = np.zeros((len(dialogues), T, Q))
    for b, d in enumerate(dialogues):
        for n, u in enumerate(d.utterances):
            audio[b, n] = u.audio_features
            text[b, n] = u.text_features
    probs, _ = model.predict(audio, text)
    return [probs[b, : len(d)] for b, d in enumerate(dialogues)]


_WORKER_MODEL = None


def _init_worker(model) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _predict_in_worker(dialogues):
    return _predict_batch(_WORKER_MODEL, dialogues)


def predict_dialogues(model, dialogues: Sequence[Dialogue], batch_size: int = 32,
                      workers: int = 1) -> list[np.ndarray]:
    """Free-running predictive distributions for each dialogue, input order preserved.

    Batches are fixed by length order and ``batch_size`` alone, so the output
    does not depend on ``workers``.
    """
    order = sorted(range(len(dialogues)), key=lambda i: (len(dialogues[i]), i))
    chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    groups = [[dialogues[i] for i in idx] for idx in chunks]
    if workers > 1 and len(groups) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model,)) as pool:
            results = list(pool.map(_predict_in_worker, groups))
    else:
        results = [_predict_batch(model, g) for g in groups]
    out: list[np.ndarray | None] = [None] * len(dialogues)
    for idx, probs in zip(chunks, results):
        for i, p in zip(idx, probs):
            out[i] = p
    return out


def evaluate(model, dialogues: Sequence[Dialogue], batch_size: int = 32, workers: int = 1) -> EvalReport:
    return build_report(dialogues, predict_dialogues(model, dialogues, batch_size, workers))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation across runs or splits."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
