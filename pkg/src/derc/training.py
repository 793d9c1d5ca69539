"""Mini-batch training: Adam with warm-up, sub-sequence augmentation and
scheduled sampling of the decoder history."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from derc.corpus import Dialogue, subsequence_sample
from derc.distributions import LossConfig, LossMode, dpn_terms, hard_terms, kl_terms, label_log_mean
from derc.errors import ConfigError, DataError, DivergenceError
from derc.model import DialogueModel, ModelConfig, shift_right
from derc.numerics import RngStream, Tensor, no_grad, ops

log = logging.getLogger(__name__)


# ------------------------------------------------------------ teacher forcing
@dataclass(frozen=True)
class Schedule:
    """Teacher-forcing decay: ``exponential`` (k), ``linear`` (a, b) or ``inverse_sigmoid`` (c)."""

    kind: str = "exponential"
    k: float = 0.999
    a: float = 1.0
    b: float = 1e-3
    c: float = 100.0

    def __post_init__(self):
        if self.kind == "exponential":
            if not 0.0 < self.k <= 1.0:
                raise ConfigError(f"schedule.k must lie in (0, 1], got {self.k!r}")
        elif self.kind == "linear":
            if not (0.0 <= self.a and self.b >= 0.0):
                raise ConfigError("schedule.a and schedule.b must be non-negative")
        elif self.kind == "inverse_sigmoid":
            if not self.c >= 1.0:
                raise ConfigError(f"schedule.c must be >= 1, got {self.c!r}")
        else:
            raise ConfigError(f"schedule.kind must be exponential, linear or inverse_sigmoid, got {self.kind!r}")


def teacher_forcing_ratio(i: int, schedule: Schedule) -> float:
    """Probability of feeding the ground-truth history at mini-batch ``i``."""
    if i < 0:
        raise ConfigError("mini-batch index must be non-negative")
    if schedule.kind == "exponential":
        eps = schedule.k ** i
    elif schedule.kind == "linear":
        eps = max(0.0, schedule.a - schedule.b * i)
    else:
        c = schedule.c
        z = i / c
        eps = 0.0 if z > 700.0 else c / (c + math.exp(z))
    return min(1.0, max(0.0, eps))


def scheduled_input(ground_truth, prediction, eps_i: float, rng: RngStream):
    """Ground truth when a U(0,1) draw is <= eps_i, else the detached prediction."""
    if not 0.0 <= eps_i <= 1.0:
        raise ConfigError(f"teacher-forcing ratio must lie in [0, 1], got {eps_i!r}")
    p_tf = rng.uniform()
    if p_tf <= eps_i:
        return ground_truth
    return prediction.detach() if isinstance(prediction, Tensor) else np.array(prediction, copy=True)


# ------------------------------------------------------------------- Adam
@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_updates: int = 100
    total_updates: int = 1000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fragments_per_dialogue: int = 1
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ConfigError(f"optim.peak_lr must be > 0, got {self.peak_lr!r}")
        if not (isinstance(self.total_updates, int) and self.total_updates >= 1):
            raise ConfigError(f"optim.total_updates must be a positive integer, got {self.total_updates!r}")
        if not (isinstance(self.warmup_updates, int) and 0 <= self.warmup_updates < self.total_updates):
            raise ConfigError("optim.warmup_updates must be an integer in [0, total_updates)")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigError(f"optim.batch_size must be a positive integer, got {self.batch_size!r}")
        if not (isinstance(self.fragments_per_dialogue, int) and self.fragments_per_dialogue >= 0):
            raise ConfigError("optim.fragments_per_dialogue must be a non-negative integer")


def learning_rate(update: int, cfg: OptimConfig) -> float:
    """Linear ramp to ``peak_lr`` over the warm-up, then linear decay to 0 at ``total_updates``."""
    if cfg.warmup_updates and update <= cfg.warmup_updates:
        return cfg.peak_lr * update / cfg.warmup_updates
    span = cfg.total_updates - cfg.warmup_updates
    return cfg.peak_lr * max(0.0, (cfg.total_updates - update) / span)


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# ----------------------------------------------------------------- batching
@dataclass
class Batch:
    audio: np.ndarray        # (B, T, Q)
    text: np.ndarray         # (B, T, Q)
    valid: np.ndarray        # (B, T) bool, False on padding
    soft: np.ndarray         # (B, T, K)
    majority: np.ndarray     # (B, T, K) one-hot, all-zero where no majority
    has_majority: np.ndarray  # (B, T) bool
    log_mu_mean: np.ndarray  # (B, T, K)
    teacher: np.ndarray      # (B, T, K) oracle history targets

    @property
    def size(self) -> int:
        return self.audio.shape[0]


def make_batch(dialogues: Sequence[Dialogue], K: int, loss: LossConfig) -> Batch:
    """Pad dialogues at the end to a common length."""
    B = len(dialogues)
    T = max(len(d) for d in dialogues)
    Q = dialogues[0].utterances[0].audio_features.size
    audio = np.zeros((B, T, Q))
    text = np.zeros((B, T, Q))
    valid = np.zeros((B, T), dtype=bool)
    soft = np.zeros((B, T, K))
    major = np.zeros((B, T, K))
    has_major = np.zeros((B, T), dtype=bool)
    logmu = np.zeros((B, T, K))
    for b, d in enumerate(dialogues):
        for n, u in enumerate(d.utterances):
            audio[b, n] = u.audio_features
            text[b, n] = u.text_features
            valid[b, n] = True
            soft[b, n] = u.soft_label
            if u.majority is not None:
                major[b, n, u.majority] = 1.0
                has_major[b, n] = True
            if loss.mode is LossMode.DPN_KL:
                logmu[b, n] = label_log_mean(u.labels, K, loss.smoothing_eps)
    if loss.mode is LossMode.HARD:
        teacher = np.where(has_major[..., None], major, soft)
    else:
        teacher = soft
    return Batch(audio, text, valid, soft, major, has_major, logmu, teacher)


def batch_loss(logits: Tensor, batch: Batch, cfg: LossConfig) -> Tensor:
    """Mean per-utterance loss over the utterances that carry a training target."""
    pred = ops.softmax(logits, axis=-1)
    if cfg.mode is LossMode.HARD:
        weight = (batch.valid & batch.has_majority).astype(np.float64)
        terms = hard_terms(pred, batch.majority)
    elif cfg.mode is LossMode.SOFT:
        weight = batch.valid.astype(np.float64)
        terms = kl_terms(pred, batch.soft)
    else:
        weight = batch.valid.astype(np.float64)
        terms = dpn_terms(logits, batch.log_mu_mean) + cfg.lam * kl_terms(pred, batch.soft)
    return (terms * weight).sum() * (1.0 / max(weight.sum(), 1.0))


def bucket_batches(samples: Sequence[Dialogue], batch_size: int, rng: RngStream) -> list[list[Dialogue]]:
    """Group samples of similar length, then shuffle the group order."""
    order = sorted(range(len(samples)), key=lambda i: (len(samples[i]), i))
    groups = [[samples[i] for i in order[s : s + batch_size]] for s in range(0, len(order), batch_size)]
    return [groups[i] for i in rng.permutation(len(groups))]


# ------------------------------------------------------------------ training
@dataclass
class EpochRecord:
    epoch: int
    updates: int
    loss: float
    tf_ratio: float


@dataclass
class TrainResult:
    model: DialogueModel
    log: list[EpochRecord]


LossFn = Callable[[Tensor, Batch, LossConfig], Tensor]


def train(dialogues: Sequence[Dialogue], loss: LossConfig, optim: OptimConfig, model_config: ModelConfig,
          rng: RngStream, loss_fn: LossFn = batch_loss, model: DialogueModel | None = None) -> TrainResult:
    """Train a fresh (or the given) model for ``optim.total_updates`` updates."""
    if not dialogues:
        raise DataError("training corpus is empty")
    K = model_config.K
    if model is None:
        model = DialogueModel.init(model_config, rng.child(1))
    params = model.parameters()
    adam = Adam(params, optim)
    data_rng = rng.child(2)
    drop_rng = rng.child(3)
    tf_rng = rng.child(4)
    history: list[EpochRecord] = []
    update = 0
    epoch = 0
    while update < optim.total_updates:
        epoch += 1
        samples = list(dialogues)
        for d in dialogues:
            samples.extend(subsequence_sample(d, data_rng) for _ in range(optim.fragments_per_dialogue))
        losses = []
        eps_i = teacher_forcing_ratio(update, optim.schedule)
        for group in bucket_batches(samples, optim.batch_size, data_rng):
            if update >= optim.total_updates:
                break
            batch = make_batch(group, K, loss)
            eps_i = teacher_forcing_ratio(update, optim.schedule)
            use_teacher = tf_rng.uniform(size=batch.valid.shape) <= eps_i
            fused = model.fuse(batch.audio, batch.text)
            if use_teacher[:, 1:].all():
                hist = shift_right(batch.teacher)
            else:
                with no_grad():
                    memory = model.encode(fused.data).data
                preds, _ = model.free_run(memory, batch.teacher, use_teacher)
                hist = np.where(use_teacher[..., None], shift_right(batch.teacher), shift_right(preds))
            logits = model.forward(fused, hist, train=True, rng=drop_rng)
            if not np.all(np.isfinite(logits.data)):
                raise DivergenceError(f"non-finite logits at update {update + 1} (epoch {epoch})")
            value = loss_fn(logits, batch, loss)
            if not math.isfinite(value.item()):
                raise DivergenceError(f"non-finite loss {value.item()!r} at update {update + 1} (epoch {epoch})")
            model.zero_grad()
            value.backward()
            update += 1
            adam.step(learning_rate(update, optim))
            losses.append(value.item())
        record = EpochRecord(epoch, update, float(np.mean(losses)), eps_i)
        log.info("epoch %d updates %d loss %.6f tf %.4f", record.epoch, record.updates, record.loss, record.tf_ratio)
        history.append(record)
    return TrainResult(model, history)
