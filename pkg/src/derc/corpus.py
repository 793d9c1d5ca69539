"""Synthetic two-modality conversations, JSON-Lines corpus I/O and augmentation.

Corpus file layout: one header record pinning ``K`` and ``Q``, then one
dialogue per line. Files ending in ``.gz`` are gzip-compressed. Fields this
module does not know about are kept in ``extra`` and written back unchanged.
"""

from __future__ import annotations

import gzip
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from derc.distributions import majority_vote, soft_label
from derc.errors import ConfigError, DataError, ParseError, SchemaError
from derc.numerics import RngStream

FORMAT_NAME = "derc-corpus"
FORMAT_VERSION = 1
SPEAKERS = ("A", "B")
SPLITS = ("train", "dev", "test")
SUM_TOL = 1e-9


@dataclass
class Utterance:
    utterance_id: str
    speaker: str
    audio_features: np.ndarray
    text_features: np.ndarray
    labels: list[int]
    soft_label: np.ndarray
    majority: int | None
    true_distribution: np.ndarray | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, utterance_id, speaker, audio, text, labels, K, true_distribution=None, extra=None):
        labels = [int(x) for x in labels]
        return cls(
            utterance_id=utterance_id,
            speaker=speaker,
            audio_features=np.asarray(audio, dtype=np.float64),
            text_features=np.asarray(text, dtype=np.float64),
            labels=labels,
            soft_label=soft_label(labels, K),
            majority=majority_vote(labels, K),
            true_distribution=None if true_distribution is None else np.asarray(true_distribution, dtype=np.float64),
            extra=dict(extra or {}),
        )


@dataclass
class Dialogue:
    dialogue_id: str
    utterances: list[Utterance]
    split: str = "train"
    extra: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass
class Corpus:
    K: int
    Q: int
    dialogues: list[Dialogue] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> list[Dialogue]:
        return [d for d in self.dialogues if d.split == name]

    def utterances(self, split: str | None = None):
        for d in self.dialogues:
            if split is None or d.split == split:
                yield from d.utterances

    def no_majority_fraction(self, split: str | None = None) -> float:
        utts = list(self.utterances(split))
        if not utts:
            return 0.0
        return sum(u.majority is None for u in utts) / len(utts)


# ----------------------------------------------------------------- generator
@dataclass(frozen=True)
class GeneratorConfig:
    K: int = 5
    annotators: int = 3
    dialogues: int = 500
    test_fraction: float = 0.2
    dev_fraction: float = 0.0
    min_len: int = 8
    max_len: int = 40
    p_stay: float = 0.7
    sharpness: float = 8.0
    floor: float = 0.8
    feature_dim: int = 32
    sigma_audio: float = 0.6
    sigma_text: float = 0.4
    speaker_repeat: float = 0.1
    seed: int = 20221018

    def __post_init__(self):
        def need(ok, name, what):
            if not ok:
                raise ConfigError(f"generator.{name} {what}, got {getattr(self, name)!r}")

        for name in ("K", "annotators", "feature_dim", "min_len"):
            v = getattr(self, name)
            need(isinstance(v, int) and v >= 1, name, "must be a positive integer")
        need(isinstance(self.dialogues, int) and self.dialogues >= 0, "dialogues", "must be a non-negative integer")
        need(isinstance(self.max_len, int) and self.max_len >= self.min_len, "max_len", "must be an integer >= min_len")
        need(self.K >= 2, "K", "must be at least 2")
        need(0.0 <= self.p_stay <= 1.0, "p_stay", "must lie in [0, 1]")
        need(0.0 <= self.speaker_repeat <= 1.0, "speaker_repeat", "must lie in [0, 1]")
        need(self.sharpness > 0, "sharpness", "must be > 0")
        need(self.floor > 0, "floor", "must be > 0")
        need(self.sigma_audio > 0, "sigma_audio", "must be > 0")
        need(self.sigma_text > 0, "sigma_text", "must be > 0")
        need(0.0 <= self.test_fraction and 0.0 <= self.dev_fraction
             and self.test_fraction + self.dev_fraction <= 1.0, "test_fraction",
             "and dev_fraction must be non-negative and sum to at most 1")
        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")


def class_anchors(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed (Q, K) anchor matrices for the audio and text channels."""
    rng = RngStream(config.seed).child(0)
    w_audio = rng.normal(size=(config.feature_dim, config.K))
    w_text = rng.normal(size=(config.feature_dim, config.K))
    return w_audio, w_text


def _split_of(index: int, config: GeneratorConfig) -> str:
    n = config.dialogues
    n_test = int(round(n * config.test_fraction))
    n_dev = int(round(n * config.dev_fraction))
    n_train = n - n_test - n_dev
    if index < n_train:
        return "train"
    if index < n_train + n_dev:
        return "dev"
    return "test"


def draw_labels(mu, annotators: int, rng: RngStream) -> np.ndarray:
    """Independent single-label annotators, each choosing class k with probability mu[k]."""
    return rng.choice(len(mu), p=mu, size=annotators)


def generate_dialogue(index: int, config: GeneratorConfig, anchors) -> Dialogue:
    rng = RngStream(config.seed).child(1, index)
    w_audio, w_text = anchors
    K = config.K
    n_utt = int(rng.integers(config.min_len, config.max_len + 1))
    dialogue_id = f"dlg{index:05d}"
    state = int(rng.integers(0, K))
    speaker = 0
    utterances = []
    for n in range(n_utt):
        if n > 0:
            if rng.uniform() >= config.p_stay:
                state = (state + 1 + int(rng.integers(0, K - 1))) % K
            if rng.uniform() >= config.speaker_repeat:
                speaker = 1 - speaker
        conc = np.full(K, config.floor)
        conc[state] += config.sharpness
        mu = rng.dirichlet(conc)
        labels = draw_labels(mu, config.annotators, rng)
        audio = w_audio @ mu + rng.normal(0.0, config.sigma_audio, size=config.feature_dim)
        text = w_text @ mu + rng.normal(0.0, config.sigma_text, size=config.feature_dim)
        utterances.append(Utterance.build(
            f"{dialogue_id}_u{n:03d}", SPEAKERS[speaker], audio, text, labels, K,
            true_distribution=mu, extra={"hidden_state": state},
        ))
    return Dialogue(dialogue_id, utterances, _split_of(index, config))


def generate(config: GeneratorConfig, workers: int = 1) -> Corpus:
    """Synthetic corpus; each dialogue draws from its own derived stream."""
    anchors = class_anchors(config)
    indices = range(config.dialogues)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            dialogues = list(pool.map(generate_dialogue, indices, [config] * config.dialogues,
                                      [anchors] * config.dialogues, chunksize=16))
    else:
        dialogues = [generate_dialogue(i, config, anchors) for i in indices]
    return Corpus(config.K, config.feature_dim, dialogues)


# ---------------------------------------------------------------- augmentation
def subsequence_sample(dialogue: Dialogue, rng: RngStream) -> Dialogue:
    """Contiguous fragment with (start, end) uniform over all pairs start <= end."""
    n = len(dialogue)
    if n < 1:
        raise DataError("cannot sample a fragment of an empty dialogue")
    pick = int(rng.integers(0, n * (n + 1) // 2))
    start = 0
    # rows of the pair triangle: start s admits n - s end points
    while pick >= n - start:
        pick -= n - start
        start += 1
    end = start + pick
    return Dialogue(
        f"{dialogue.dialogue_id}[{start}:{end + 1}]",
        dialogue.utterances[start : end + 1],
        dialogue.split,
        dict(dialogue.extra),
    )


# -------------------------------------------------------------------- I/O
_UTT_FIELDS = ("utterance_id", "speaker", "audio_features", "text_features", "labels",
               "soft_label", "majority", "true_distribution")
_DLG_FIELDS = ("record", "dialogue_id", "split", "utterances")
_HEADER_FIELDS = ("record", "format", "version", "K", "Q")


def _floats(values) -> list[float]:
    return [float(v) for v in values]


def _utterance_record(u: Utterance) -> dict:
    rec = {
        "utterance_id": u.utterance_id,
        "speaker": u.speaker,
        "audio_features": _floats(u.audio_features),
        "text_features": _floats(u.text_features),
        "labels": list(u.labels),
        "soft_label": _floats(u.soft_label),
        "majority": u.majority,
    }
    if u.true_distribution is not None:
        rec["true_distribution"] = _floats(u.true_distribution)
    rec.update(u.extra)
    return rec


def dumps_corpus(corpus: Corpus) -> str:
    header = {"record": "header", "format": FORMAT_NAME, "version": FORMAT_VERSION,
              "K": corpus.K, "Q": corpus.Q}
    header.update(corpus.extra)
    lines = [json.dumps(header)]
    for d in corpus.dialogues:
        rec = {"record": "dialogue", "dialogue_id": d.dialogue_id, "split": d.split,
               "utterances": [_utterance_record(u) for u in d.utterances]}
        rec.update(d.extra)
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(corpus: Corpus, path: str | os.PathLike) -> None:
    payload = dumps_corpus(corpus).encode("utf-8")
    if str(path).endswith(".gz"):
        buf = io.BytesIO()
        # fixed mtime and empty name keep the compressed bytes reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    atomic_write_bytes(path, payload)


def _require(rec: dict, name: str, line: int, where: str):
    if name not in rec:
        raise SchemaError(f"{where} is missing required field '{name}'", field=name, line=line)
    return rec[name]


def _vector(rec, name, length, line, where) -> np.ndarray:
    raw = _require(rec, name, line, where)
    if not isinstance(raw, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise SchemaError(f"{where} field '{name}' must be a list of numbers", field=name, line=line)
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape != (length,):
        raise SchemaError(f"{where} field '{name}' has length {arr.size}, expected {length}", field=name, line=line)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{where} field '{name}' contains non-finite values", field=name, line=line)
    return arr


def _distribution(rec, name, K, line, where) -> np.ndarray:
    arr = _vector(rec, name, K, line, where)
    if np.any(arr < 0.0) or abs(arr.sum() - 1.0) > SUM_TOL:
        raise SchemaError(
            f"{where} field '{name}' violates the normalization invariant "
            f"(entries >= 0 summing to 1 within {SUM_TOL}); sum is {arr.sum()!r}",
            field=name, line=line)
    return arr


def _parse_utterance(rec, K, Q, line) -> Utterance:
    if not isinstance(rec, dict):
        raise SchemaError("utterance entries must be objects", field="utterances", line=line)
    uid = _require(rec, "utterance_id", line, "utterance")
    where = f"utterance {uid!r}"
    speaker = _require(rec, "speaker", line, where)
    audio = _vector(rec, "audio_features", Q, line, where)
    text = _vector(rec, "text_features", Q, line, where)
    labels = _require(rec, "labels", line, where)
    if (not isinstance(labels, list) or not labels
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in labels)):
        raise SchemaError(f"{where} field 'labels' must be a non-empty list of class indices", field="labels", line=line)
    if any(x < 0 or x >= K for x in labels):
        raise SchemaError(f"{where} field 'labels' has a class index outside [0, {K})", field="labels", line=line)
    truth = _distribution(rec, "true_distribution", K, line, where) if "true_distribution" in rec else None
    u = Utterance.build(uid, speaker, audio, text, labels, K, truth,
                        {k: v for k, v in rec.items() if k not in _UTT_FIELDS})
    if "soft_label" in rec:
        stored = _distribution(rec, "soft_label", K, line, where)
        if not np.array_equal(stored, u.soft_label):
            raise SchemaError(f"{where} field 'soft_label' disagrees with its annotator labels",
                              field="soft_label", line=line)
    if "majority" in rec and rec["majority"] != u.majority:
        raise SchemaError(f"{where} field 'majority' disagrees with its annotator labels",
                          field="majority", line=line)
    return u


def loads_corpus(text: str) -> Corpus:
    corpus: Corpus | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", line=lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("each line must hold a JSON object", line=lineno)
        kind = _require(rec, "record", lineno, "record")
        if corpus is None:
            if kind != "header":
                raise SchemaError("first record must be the header", field="record", line=lineno)
            if _require(rec, "format", lineno, "header") != FORMAT_NAME:
                raise SchemaError(f"unknown corpus format {rec['format']!r}", field="format", line=lineno)
            version = _require(rec, "version", lineno, "header")
            if version != FORMAT_VERSION:
                raise SchemaError(f"unsupported corpus version {version!r}", field="version", line=lineno)
            K = _require(rec, "K", lineno, "header")
            Q = _require(rec, "Q", lineno, "header")
            if not (isinstance(K, int) and K >= 2 and isinstance(Q, int) and Q >= 1):
                raise SchemaError("header K must be >= 2 and Q >= 1", field="K", line=lineno)
            corpus = Corpus(K, Q, [], {k: v for k, v in rec.items() if k not in _HEADER_FIELDS})
            continue
        if kind != "dialogue":
            raise SchemaError(f"unknown record type {kind!r}", field="record", line=lineno)
        did = _require(rec, "dialogue_id", lineno, "dialogue")
        split = _require(rec, "split", lineno, f"dialogue {did!r}")
        if split not in SPLITS:
            raise SchemaError(f"dialogue {did!r} has split {split!r}, expected one of {SPLITS}",
                              field="split", line=lineno)
        utts = _require(rec, "utterances", lineno, f"dialogue {did!r}")
        if not isinstance(utts, list) or not utts:
            raise SchemaError(f"dialogue {did!r} must contain at least one utterance", field="utterances", line=lineno)
        parsed = [_parse_utterance(u, corpus.K, corpus.Q, lineno) for u in utts]
        ids = [u.utterance_id for u in parsed]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"dialogue {did!r} repeats an utterance id", field="utterance_id", line=lineno)
        corpus.dialogues.append(Dialogue(did, parsed, split, {k: v for k, v in rec.items() if k not in _DLG_FIELDS}))
    if corpus is None:
        raise SchemaError("corpus file has no header record", field="record")
    return corpus


def load(path: str | os.PathLike) -> Corpus:
    with open(path, "rb") as fh:
        payload = fh.read()
    if str(path).endswith(".gz"):
        payload = gzip.decompress(payload)
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"corpus is not valid UTF-8 ({exc.reason})") from None
    return loads_corpus(text)
