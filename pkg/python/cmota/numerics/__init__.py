"""Dense tensor math with reverse-mode gradients."""

from cmota.numerics.functional import (
    GruParams,
    attention,
    concat,
    cross_entropy,
    gru_cell,
    masked_softmax,
    matmul,
)
from cmota.numerics.gradcheck import grad_check
from cmota.numerics.module import Module
from cmota.numerics.tensor import Tensor, grad, is_grad_enabled, no_grad

__all__ = [
    "GruParams",
    "Module",
    "Tensor",
    "attention",
    "concat",
    "cross_entropy",
    "grad",
    "grad_check",
    "gru_cell",
    "is_grad_enabled",
    "masked_softmax",
    "matmul",
    "no_grad",
]
