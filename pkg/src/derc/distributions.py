"""Soft labels, Dirichlet priors and the HARD / SOFT / DPN-KL training losses.

Loss functions take :class:`~derc.numerics.Tensor` logits or predictions with
arbitrary leading (batch, time) axes and the class axis last; the batched
``*_terms`` variants return one loss per item so callers can mask and average.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from derc.errors import ConfigError, DataError, DomainError
from derc.numerics import Tensor, as_tensor, ops
from derc.numerics import special

NUM_CLASSES = 5
DEFAULT_LAMBDA = 20.0
DEFAULT_SMOOTHING = 0.01


class LossMode(str, enum.Enum):
    HARD = "HARD"
    SOFT = "SOFT"
    DPN_KL = "DPN_KL"

    @classmethod
    def parse(cls, value) -> "LossMode":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"loss.mode must be one of HARD, SOFT, DPN_KL, got {value!r}") from None


@dataclass(frozen=True)
class LossConfig:
    mode: LossMode = LossMode.DPN_KL
    lam: float = DEFAULT_LAMBDA
    smoothing_eps: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        object.__setattr__(self, "mode", LossMode.parse(self.mode))
        if not (self.lam >= 0.0 and np.isfinite(self.lam)):
            raise ConfigError(f"loss.lam must be a non-negative real, got {self.lam!r}")
        if not 0.0 < self.smoothing_eps < 0.5:
            raise ConfigError(f"loss.smoothing_eps must lie in (0, 0.5), got {self.smoothing_eps!r}")


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size == 0:
            raise DomainError("alpha must be a non-empty vector")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DomainError("every concentration parameter must be finite and > 0")
        object.__setattr__(self, "alpha", alpha)

    @property
    def alpha0(self) -> float:
        return float(self.alpha.sum())

    @classmethod
    def from_logits(cls, logits) -> "DirichletParams":
        return cls(np.exp(np.asarray(logits, dtype=np.float64)))


def check_distribution(p, tol: float = 1e-9, what: str = "distribution") -> np.ndarray:
    """Validate a point on the simplex and return it as an array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DataError(f"{what} must be a non-empty vector")
    if np.any(p < -tol) or np.any(p > 1.0 + tol) or not np.all(np.isfinite(p)):
        raise DataError(f"{what} entries must lie in [0, 1]")
    total = float(p.sum())
    if abs(total - 1.0) > tol:
        raise DataError(f"{what} must sum to 1 (normalization invariant), sums to {total!r}")
    return p


def _check_labels(labels: Sequence[int], K: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size == 0:
        raise DataError("annotator label set must contain at least one label")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"annotator labels must be class indices, got {list(labels)!r}")
    if np.any(arr < 0) or np.any(arr >= K):
        raise DataError(f"class index out of range [0, {K}): {arr.tolist()}")
    return arr


def soft_label(labels: Sequence[int], K: int = NUM_CLASSES) -> np.ndarray:
    """Fraction of annotators choosing each class."""
    arr = _check_labels(labels, K)
    return np.bincount(arr, minlength=K).astype(np.float64) / arr.size


def majority_vote(labels: Sequence[int], K: int | None = None) -> int | None:
    """Class with a strictly unique maximum count of at least 2, else ``None``."""
    arr = _check_labels(labels, K if K is not None else int(np.max(labels)) + 1)
    counts = np.bincount(arr)
    top = counts.max()
    if top < 2 or np.count_nonzero(counts == top) != 1:
        return None
    return int(np.argmax(counts))


def smooth_one_hot(label: int, K: int, eps: float) -> np.ndarray:
    mu = np.full(K, eps / K)
    mu[label] += 1.0 - eps
    return mu


def label_log_mean(labels: Sequence[int], K: int, eps: float) -> np.ndarray:
    """Mean over annotators of ln smooth(one_hot(label)), per class."""
    arr = _check_labels(labels, K)
    return np.mean([np.log(smooth_one_hot(int(k), K, eps)) for k in arr], axis=0)


def dirichlet_log_density(mu, alpha):
    """ln Dir(mu | alpha). Differentiable in ``alpha`` when it is a Tensor."""
    mu_arr = np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=np.float64)
    if np.any(mu_arr <= 0.0):
        raise DomainError("dirichlet_log_density needs mu strictly inside the simplex (smooth one-hot samples first)")
    if isinstance(alpha, DirichletParams):
        alpha = alpha.alpha
    if isinstance(alpha, Tensor):
        if np.any(alpha.data <= 0.0):
            raise DomainError("concentration parameters must be > 0")
        return _log_density_terms(alpha, np.log(mu_arr))
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0.0):
        raise DomainError("concentration parameters must be > 0")
    out = (special.lgamma(alpha.sum(axis=-1))
           - special.lgamma(alpha).sum(axis=-1)
           + ((alpha - 1.0) * np.log(mu_arr)).sum(axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def _log_density_terms(alpha: Tensor, log_mu: np.ndarray) -> Tensor:
    alpha0 = alpha.sum(axis=-1)
    return (
        ops.lgamma(alpha0)
        - ops.lgamma(alpha).sum(axis=-1)
        + ((alpha - 1.0) * log_mu).sum(axis=-1)
    )


def predictive_distribution(alpha):
    """Expected categorical distribution alpha / alpha0."""
    if isinstance(alpha, DirichletParams):
        alpha = alpha.alpha
    if isinstance(alpha, Tensor):
        return alpha / alpha.sum(axis=-1, keepdims=True)
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha / alpha.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- batched
def dpn_terms(logits: Tensor, log_mu_mean) -> Tensor:
    """Per-item DPN negative log-likelihood with alpha = exp(logits).

    ``log_mu_mean`` holds :func:`label_log_mean` for each item.
    """
    return -_log_density_terms(ops.exp(logits), np.asarray(log_mu_mean, dtype=np.float64))


def kl_terms(pred: Tensor, soft) -> Tensor:
    """Per-item KL(soft || pred) with 0 ln 0 = 0."""
    soft = np.asarray(soft, dtype=np.float64)
    entropy_term = np.sum(np.where(soft > 0.0, soft * np.log(np.where(soft > 0.0, soft, 1.0)), 0.0), axis=-1)
    return -(ops.log(pred) * soft).sum(axis=-1) + entropy_term


def hard_terms(pred: Tensor, target_one_hot) -> Tensor:
    """Per-item -ln pred[majority]; all-zero target rows give exactly 0."""
    return -(ops.log(pred) * np.asarray(target_one_hot, dtype=np.float64)).sum(axis=-1)


# -------------------------------------------------------------- per-item API
def loss_dpn(logits, labels: Sequence[int], smoothing_eps: float = DEFAULT_SMOOTHING) -> Tensor:
    logits = as_tensor(logits)
    K = logits.shape[-1]
    return dpn_terms(logits, label_log_mean(labels, K, smoothing_eps))


def loss_kl(pred, soft) -> Tensor:
    return kl_terms(as_tensor(pred), soft)


def loss_hard(pred, majority: int | None) -> Tensor:
    pred = as_tensor(pred)
    target = np.zeros(pred.shape[-1])
    if majority is not None:
        target[majority] = 1.0
    return hard_terms(pred, target)


def loss_combined(logits, labels: Sequence[int], soft, config: LossConfig) -> Tensor:
    if config.mode is not LossMode.DPN_KL:
        raise ConfigError("loss_combined requires mode DPN_KL")
    logits = as_tensor(logits)
    pred = ops.softmax(logits, axis=-1)
    return loss_dpn(logits, labels, config.smoothing_eps) + config.lam * loss_kl(pred, soft)
