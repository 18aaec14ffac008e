from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad
from . import ops
from .ops import (
    add, sub, neg, mul, div, matmul, relu, gelu, exp, log, sum, mean,
    softmax, layernorm, concat, reshape, transpose, slice_rows, embedding,
    keep_top_k, scale_rows, scale_channels, cross_entropy_logits,
)
from .conv import conv3d, upsample_nearest3d

__all__ = [
    "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad", "ops",
    "add", "sub", "neg", "mul", "div", "matmul", "relu", "gelu", "exp",
    "log", "sum", "mean", "softmax", "layernorm", "concat", "reshape",
    "transpose", "slice_rows", "embedding", "keep_top_k", "scale_rows",
    "scale_channels", "cross_entropy_logits", "conv3d", "upsample_nearest3d",
]
