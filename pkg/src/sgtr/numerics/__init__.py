from . import losses
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckError, GradReport, grad_check
from .losses import cross_entropy, kl_div, kl_probs, mse, smooth_l1
from .optim import Adam
from .tensor import (
    DiffValue,
    ShapeError,
    SwitchTape,
    add,
    add_bias,
    add_const,
    backward,
    broadcast_mul,
    concat,
    constant,
    conv2d,
    exp,
    log,
    log_softmax_rows,
    mask_grad,
    matmul,
    mean,
    mul,
    parameter,
    relu,
    repeat,
    reshape,
    scale,
    scatter_rows,
    segment_max,
    sigmoid,
    softmax_rows,
    spmm,
    square,
    sub,
    switch_tape,
    take_rows,
    transpose,
)

__all__ = [
    "Adam", "CheckpointError", "DiffValue", "GradCheckError", "GradReport", "ShapeError", "SwitchTape", "switch_tape",
    "add", "add_bias", "add_const", "exp", "scatter_rows", "square", "sub", "backward", "broadcast_mul", "concat", "constant", "conv2d", "cross_entropy", "grad_check",
    "kl_div", "kl_probs", "load_checkpoint", "log", "log_softmax_rows", "losses", "mask_grad",
    "matmul", "mean", "mse", "mul", "parameter", "relu", "repeat", "reshape", "save_checkpoint",
    "scale", "segment_max", "sigmoid", "smooth_l1", "softmax_rows", "spmm", "take_rows", "transpose",
]
