"""Self-contained tensor engine: recorded ops, reverse-mode grads, SDAT I/O."""

from .gradcheck import GradCheckEntry, GradCheckReport, grad_check
from .ops import (
    absolute,
    bilinear_resize,
    channel_pool,
    clip,
    concat,
    conv2d,
    global_avg_pool,
    log,
    matmul,
    narrow,
    reciprocal,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
)
from .sdat import decode_tensor, encode_tensor, read_tensor, write_tensor
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    mul,
    neg,
    no_grad,
    record,
    reset_tape,
    scale,
    sub,
)

__all__ = [
    "GradCheckEntry",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "absolute",
    "active_tape",
    "add",
    "backward",
    "bilinear_resize",
    "channel_pool",
    "clip",
    "concat",
    "conv2d",
    "decode_tensor",
    "encode_tensor",
    "global_avg_pool",
    "grad_check",
    "log",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "read_tensor",
    "reciprocal",
    "record",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "reset_tape",
    "scale",
    "sigmoid",
    "softmax",
    "sqrt",
    "sub",
    "write_tensor",
]
