"""Low-rank bilinear pooling of two modality vectors with linear shortcuts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from derc.errors import UsageError
from derc.numerics import Tensor, as_tensor, ops

FULL_INPUT_DIM = 768
FULL_RANK = 256
FULL_OUTPUT_DIM = 256


@dataclass
class FusionParams:
    """Weights of the fusion layer.

    ``U1``/``U2`` are (Q, D) factor matrices, ``P`` is (O, D), ``b`` is (O,),
    and the shortcut maps ``V1``/``V2`` are (O, Q).
    """

    U1: Tensor
    U2: Tensor
    P: Tensor
    b: Tensor
    V1: Tensor
    V2: Tensor

    def __post_init__(self):
        q, d = self.U1.shape
        o = self.P.shape[0]
        expected = {
            "U1": (q, d), "U2": (q, d), "P": (o, d), "b": (o,), "V1": (o, q), "V2": (o, q),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise UsageError(f"fusion param {name} has shape {got}, expected {shape}")

    @property
    def input_dim(self) -> int:
        return self.U1.shape[0]

    @property
    def rank(self) -> int:
        return self.U1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.P.shape[0]

    def named(self, prefix: str = "fusion.") -> dict[str, Tensor]:
        return {prefix + k: getattr(self, k) for k in ("U1", "U2", "P", "b", "V1", "V2")}

    @classmethod
    def init(cls, rng, input_dim: int = FULL_INPUT_DIM, rank: int = FULL_RANK,
             output_dim: int = FULL_OUTPUT_DIM) -> "FusionParams":
        """Uniform(-s, s) init with s = 1/sqrt(fan_in) of each map."""

        def uni(shape, fan_in):
            s = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

        return cls(
            U1=uni((input_dim, rank), input_dim),
            U2=uni((input_dim, rank), input_dim),
            P=uni((output_dim, rank), rank),
            b=uni((output_dim,), rank),
            V1=uni((output_dim, input_dim), input_dim),
            V2=uni((output_dim, input_dim), input_dim),
        )


def fuse(e1, e2, params: FusionParams) -> Tensor:
    """Fused vector c = P (tanh(U1^T e1) * tanh(U2^T e2)) + b + V1 e1 + V2 e2.

    ``e1``/``e2`` may carry leading batch axes; the feature axis is last.
    """
    e1, e2 = as_tensor(e1), as_tensor(e2)
    q = params.input_dim
    if e1.shape[-1] != q or e2.shape[-1] != q:
        raise UsageError(f"fusion expects {q}-dim inputs, got {e1.shape[-1]} and {e2.shape[-1]}")
    if e1.shape != e2.shape:
        raise UsageError(f"modality shapes differ: {e1.shape} vs {e2.shape}")
    lead = e1.shape[:-1]
    a = e1.reshape(-1, q)
    t = e2.reshape(-1, q)
    joint = ops.tanh(a @ params.U1) * ops.tanh(t @ params.U2)
    c_star = joint @ params.P.transpose() + params.b
    c = c_star + a @ params.V1.transpose() + t @ params.V2.transpose()
    return c.reshape(*lead, params.output_dim)
