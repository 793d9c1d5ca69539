"""Causal Transformer encoder-decoder over fused utterance features.

Step ``n`` of the decoder sees the fused features of utterances ``0..n`` and
the emotion distributions of utterances ``0..n-1`` (a learned
begin-of-dialogue vector fills slot 0). Everything runs on batches shaped
``(B, T, ...)``; padding sits at the end of a sequence, so the causal masks
already keep it out of every real position.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from derc.errors import ConfigError, UsageError
from derc.fusion import FusionParams, fuse
from derc.numerics import RngStream, Tensor, no_grad, ops


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 64
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    heads: int = 2
    feedforward_dim: int | None = None
    dropout: float = 0.10
    K: int = 5
    feature_dim: int = 32
    fusion_rank: int = 32
    fusion_dim: int = 64

    def __post_init__(self):
        if self.feedforward_dim is None:
            object.__setattr__(self, "feedforward_dim", 4 * self.model_dim)
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout":
                if not 0.0 <= v < 1.0:
                    raise ConfigError(f"model.dropout must lie in [0, 1), got {v!r}")
            elif not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"model.{f.name} must be a positive integer, got {v!r}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model.model_dim ({self.model_dim}) must be divisible by model.heads ({self.heads})")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Dimensions used for 768-dim audio/text encoder features."""
        base = dict(model_dim=256, encoder_blocks=4, decoder_blocks=4, heads=4, dropout=0.10,
                    feature_dim=768, fusion_rank=256, fusion_dim=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(position: int, dim: int) -> np.ndarray:
    """Sinusoid: sin on even entries, cos on odd, wavelength 10000^(2i/dim)."""
    if position < 0:
        raise UsageError("position must be non-negative")
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = position / np.power(10000.0, i / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle[: dim // 2])
    return out


def positional_table(length: int, dim: int) -> np.ndarray:
    return np.stack([positional_encoding(p, dim) for p in range(length)]) if length else np.zeros((0, dim))


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, -np.inf, 0.0)


def shift_right(dists: np.ndarray) -> np.ndarray:
    """Decoder history for target distributions ``(B, T, K)``: slot n holds step n-1."""
    hist = np.zeros_like(dists)
    hist[:, 1:] = dists[:, :-1]
    return hist


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * gain + bias


@dataclass
class DialogueModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    # ----------------------------------------------------------------- init
    @classmethod
    def init(cls, config: ModelConfig, rng: RngStream, zero_head: bool = False) -> "DialogueModel":
        c = config
        p: dict[str, Tensor] = {}

        def uni(name, shape, fan_in):
            s = 1.0 / math.sqrt(fan_in)
            p[name] = Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)

        def linear(name, n_in, n_out):
            uni(name + ".w", (n_in, n_out), n_in)
            uni(name + ".b", (n_out,), n_in)

        def norm(name, n):
            p[name + ".g"] = Tensor(np.ones(n), requires_grad=True, name=name + ".g")
            p[name + ".b"] = Tensor(np.zeros(n), requires_grad=True, name=name + ".b")

        def attention(name):
            for part in ("q", "k", "v", "o"):
                linear(f"{name}.{part}", c.model_dim, c.model_dim)

        def feedforward(name):
            linear(name + ".fc1", c.model_dim, c.feedforward_dim)
            linear(name + ".fc2", c.feedforward_dim, c.model_dim)

        fusion = FusionParams.init(rng, c.feature_dim, c.fusion_rank, c.fusion_dim)
        for name, t in fusion.named().items():
            t.name = name
            p[name] = t
        linear("embed.x", c.fusion_dim, c.model_dim)
        linear("embed.y", c.K, c.model_dim)
        uni("embed.bos", (c.model_dim,), c.model_dim)
        for i in range(c.encoder_blocks):
            norm(f"enc.{i}.ln1", c.model_dim)
            attention(f"enc.{i}.self")
            norm(f"enc.{i}.ln2", c.model_dim)
            feedforward(f"enc.{i}.ff")
        norm("enc.ln", c.model_dim)
        for i in range(c.decoder_blocks):
            norm(f"dec.{i}.ln1", c.model_dim)
            attention(f"dec.{i}.self")
            norm(f"dec.{i}.ln2", c.model_dim)
            attention(f"dec.{i}.cross")
            norm(f"dec.{i}.ln3", c.model_dim)
            feedforward(f"dec.{i}.ff")
        norm("dec.ln", c.model_dim)
        linear("head", c.model_dim, c.K)
        if zero_head:
            p["head.w"].data[...] = 0.0
            p["head.b"].data[...] = 0.0
        return cls(config, p)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    @property
    def fusion(self) -> FusionParams:
        p = self.params
        return FusionParams(p["fusion.U1"], p["fusion.U2"], p["fusion.P"], p["fusion.b"],
                            p["fusion.V1"], p["fusion.V2"])

    # -------------------------------------------------------------- layers
    def _linear(self, x, name):
        return x @ self.params[name + ".w"] + self.params[name + ".b"]

    def _norm(self, x, name):
        return ops.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def _attention(self, xq, xkv, name, mask):
        c = self.config
        B, Tq, D = xq.shape
        Tk = xkv.shape[1]
        h, dh = c.heads, D // c.heads
        q = self._linear(xq, name + ".q").reshape(B, Tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, name + ".k").reshape(B, Tk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, name + ".v").reshape(B, Tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + mask
        ctx = ops.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return self._linear(ctx, name + ".o")

    def _feedforward(self, x, name, train, rng):
        hidden = ops.relu(self._linear(x, name + ".fc1"))
        hidden = ops.dropout(hidden, self.config.dropout, rng, train)
        return self._linear(hidden, name + ".fc2")

    # ------------------------------------------------------------- forward
    def fuse(self, audio, text) -> Tensor:
        return fuse(audio, text, self.fusion)

    def encode(self, fused, train: bool = False, rng: RngStream | None = None) -> Tensor:
        """Encoder states ``(B, T, model_dim)``; position n sees inputs 0..n."""
        c = self.config
        fused = ops.as_tensor(fused)
        T = fused.shape[1]
        mask = causal_mask(T)
        x = self._linear(fused, "embed.x") + positional_table(T, c.model_dim)
        x = ops.dropout(x, c.dropout, rng, train)
        for i in range(c.encoder_blocks):
            y = self._norm(x, f"enc.{i}.ln1")
            x = x + ops.dropout(self._attention(y, y, f"enc.{i}.self", mask), c.dropout, rng, train)
            y = self._norm(x, f"enc.{i}.ln2")
            x = x + ops.dropout(self._feedforward(y, f"enc.{i}.ff", train, rng), c.dropout, rng, train)
        return self._norm(x, "enc.ln")

    def decode(self, memory, history, train: bool = False, rng: RngStream | None = None) -> Tensor:
        """Logits ``(B, T, K)`` from encoder memory and shifted history ``(B, T, K)``.

        ``history[:, 0]`` is ignored (begin-of-dialogue slot).
        """
        c = self.config
        memory = ops.as_tensor(memory)
        history = np.asarray(history.data if isinstance(history, Tensor) else history, dtype=np.float64)
        B, T = history.shape[:2]
        if memory.shape[:2] != (B, T):
            raise UsageError(f"history shape {history.shape[:2]} does not match features {memory.shape[:2]}")
        mask = causal_mask(T)
        first = np.zeros((T, 1))
        first[0] = 1.0
        y = self._linear(history, "embed.y") * (1.0 - first) + self.params["embed.bos"] * first
        x = y + positional_table(T, c.model_dim)
        x = ops.dropout(x, c.dropout, rng, train)
        for i in range(c.decoder_blocks):
            z = self._norm(x, f"dec.{i}.ln1")
            x = x + ops.dropout(self._attention(z, z, f"dec.{i}.self", mask), c.dropout, rng, train)
            z = self._norm(x, f"dec.{i}.ln2")
            x = x + ops.dropout(self._attention(z, memory, f"dec.{i}.cross", mask), c.dropout, rng, train)
            z = self._norm(x, f"dec.{i}.ln3")
            x = x + ops.dropout(self._feedforward(z, f"dec.{i}.ff", train, rng), c.dropout, rng, train)
        return self._linear(self._norm(x, "dec.ln"), "head")

    def forward(self, fused, history, train: bool = False, rng: RngStream | None = None) -> Tensor:
        """Per-step logits for fused features ``(B, T, O)`` and shifted history."""
        fused = ops.as_tensor(fused)
        hist_shape = np.shape(history.data if isinstance(history, Tensor) else history)
        if fused.ndim != 3 or len(hist_shape) != 3 or fused.shape[:2] != tuple(hist_shape[:2]):
            raise UsageError(f"feature shape {fused.shape} and history shape {hist_shape} disagree")
        if train and self.config.dropout > 0 and rng is None:
            raise UsageError("training-mode forward with dropout needs an rng")
        return self.decode(self.encode(fused, train, rng), history, train, rng)

    def __call__(self, audio, text, history, train: bool = False, rng: RngStream | None = None) -> Tensor:
        return self.forward(self.fuse(audio, text), history, train, rng)

    # ------------------------------------------------------------ decoding
    def free_run(self, memory, teacher: np.ndarray | None = None,
                 use_teacher: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Auto-regressive decode without gradients, in eval mode.

        Slot n of the history takes ``teacher[:, n-1]`` where
        ``use_teacher[:, n]`` is true and the model's own step n-1 output
        otherwise. Returns predictive distributions and logits, ``(B, T, K)``.
        Uses cached keys/values, so each step only computes its own row.
        """
        memory = np.asarray(memory.data if isinstance(memory, Tensor) else memory)
        c = self.config
        p = {k: v.data for k, v in self.params.items()}
        B, T = memory.shape[:2]
        h, dh = c.heads, c.model_dim // c.heads
        scale = 1.0 / math.sqrt(dh)
        pos = positional_table(T, c.model_dim)

        def split(x):  # (B, t, D) -> (B, h, t, dh)
            return x.reshape(B, -1, h, dh).transpose(0, 2, 1, 3)

        cross_kv = [
            (split(memory @ p[f"dec.{i}.cross.k.w"] + p[f"dec.{i}.cross.k.b"]),
             split(memory @ p[f"dec.{i}.cross.v.w"] + p[f"dec.{i}.cross.v.b"]))
            for i in range(c.decoder_blocks)
        ]
        self_k = [np.zeros((B, h, T, dh)) for _ in range(c.decoder_blocks)]
        self_v = [np.zeros((B, h, T, dh)) for _ in range(c.decoder_blocks)]

        def lin(x, name):
            return x @ p[name + ".w"] + p[name + ".b"]

        def attend(q, k, v):
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            return _softmax_np(s) @ v

        probs = np.zeros((B, T, c.K))
        logits = np.zeros((B, T, c.K))
        for n in range(T):
            if n == 0:
                x = np.broadcast_to(p["embed.bos"], (B, c.model_dim)).copy()
            else:
                prev = probs[:, n - 1]
                if use_teacher is not None:
                    prev = np.where(use_teacher[:, n, None], teacher[:, n - 1], prev)
                x = lin(prev, "embed.y")
            x = (x + pos[n])[:, None, :]
            for i in range(c.decoder_blocks):
                z = _layer_norm_np(x, p[f"dec.{i}.ln1.g"], p[f"dec.{i}.ln1.b"])
                self_k[i][:, :, n] = split(lin(z, f"dec.{i}.self.k"))[:, :, 0]
                self_v[i][:, :, n] = split(lin(z, f"dec.{i}.self.v"))[:, :, 0]
                q = split(lin(z, f"dec.{i}.self.q"))
                ctx = attend(q, self_k[i][:, :, : n + 1], self_v[i][:, :, : n + 1])
                x = x + lin(ctx.transpose(0, 2, 1, 3).reshape(B, 1, -1), f"dec.{i}.self.o")
                z = _layer_norm_np(x, p[f"dec.{i}.ln2.g"], p[f"dec.{i}.ln2.b"])
                q = split(lin(z, f"dec.{i}.cross.q"))
                k, v = cross_kv[i]
                ctx = attend(q, k[:, :, : n + 1], v[:, :, : n + 1])
                x = x + lin(ctx.transpose(0, 2, 1, 3).reshape(B, 1, -1), f"dec.{i}.cross.o")
                z = _layer_norm_np(x, p[f"dec.{i}.ln3.g"], p[f"dec.{i}.ln3.b"])
                x = x + lin(np.maximum(lin(z, f"dec.{i}.ff.fc1"), 0.0), f"dec.{i}.ff.fc2")
            step = lin(_layer_norm_np(x, p["dec.ln.g"], p["dec.ln.b"]), "head")[:, 0]
            logits[:, n] = step
            probs[:, n] = _softmax_np(step)
        return probs, logits

    def predict(self, audio, text) -> tuple[np.ndarray, np.ndarray]:
        """Free-running predictions for ``(B, T, Q)`` modality features."""
        with no_grad():
            memory = self.encode(self.fuse(audio, text)).data
        return self.free_run(memory)

    def predict_dialogue(self, audio, text) -> tuple[np.ndarray, np.ndarray]:
        """One dialogue ``(T, Q)`` -> predictive distributions and DPN concentrations ``alpha = exp(logits)``."""
        probs, logits = self.predict(np.asarray(audio)[None], np.asarray(text)[None])
        return probs[0], np.exp(logits[0])
