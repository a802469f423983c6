from perfusion.numerics.checkpoint import load_checkpoint, save_checkpoint
from perfusion.numerics.module import MLP, Linear, Module
from perfusion.numerics.optim import AdamW, OptimizerState, adamw_step
from perfusion.numerics.tensor import (
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    cosine_similarity,
    elementwise,
    exp,
    gelu,
    layer_norm,
    log,
    log_sigmoid,
    logsumexp,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
    take,
    tsum,
    transpose,
)

__all__ = [
    "AdamW", "Linear", "MLP", "Module", "OptimizerState", "Tensor", "adamw_step", "add", "as_tensor",
    "clip", "concat", "cosine_similarity", "elementwise", "exp", "gelu", "layer_norm", "load_checkpoint",
    "log", "log_sigmoid", "logsumexp", "matmul", "mean", "mul", "no_grad", "parameter", "reshape",
    "save_checkpoint", "sigmoid", "softmax", "square", "sub", "take", "transpose", "tsum",
]
