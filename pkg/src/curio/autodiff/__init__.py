"""Reverse-mode automatic differentiation over dense numpy buffers."""

from .tensor import OpNode, Tensor, backward
from .ops import (
    concat,
    conv2d,
    cosine_embedding_loss,
    linear,
    lrn,
    maxpool,
    mse_loss,
    per_bin_softmax_loss,
    relu,
    reshape,
    scale,
    shift,
    softmax_cross_entropy,
    sum_all,
)
from .gradcheck import GradCheckReport, ParamCheck, grad_check

__all__ = [
    "Tensor",
    "OpNode",
    "backward",
    "conv2d",
    "relu",
    "lrn",
    "maxpool",
    "linear",
    "reshape",
    "concat",
    "sum_all",
    "scale",
    "shift",
    "mse_loss",
    "cosine_embedding_loss",
    "per_bin_softmax_loss",
    "softmax_cross_entropy",
    "grad_check",
    "GradCheckReport",
    "ParamCheck",
]
