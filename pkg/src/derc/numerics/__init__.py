"""Float64 tensors with reverse-mode autodiff, special functions and RNG streams."""

from derc.numerics.rng import RngStream
from derc.numerics.special import digamma, lgamma
from derc.numerics.tensor import (
    Tensor,
    as_tensor,
    counters,
    dropout,
    exp,
    inject_fault,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    relu,
    softmax,
    tanh,
    tsum,
)
from derc.numerics import tensor as ops

__all__ = [
    "RngStream",
    "Tensor",
    "as_tensor",
    "counters",
    "digamma",
    "dropout",
    "exp",
    "inject_fault",
    "layer_norm",
    "lgamma",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "no_grad",
    "ops",
    "relu",
    "softmax",
    "tanh",
    "tsum",
]
