from .tensor import (
    MASK_VALUE,
    Tensor,
    add,
    as_tensor,
    bce_loss,
    bce_sum_and_mean,
    clamp,
    concat_lastdim,
    dropout,
    embedding_lookup,
    get_default_dtype,
    layernorm,
    linear,
    log,
    masked_rows,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax_lastdim,
    sub,
    transpose,
    tmean,
    tsum,
)
from .optim import AdamState, adam_step, clip_grad_norm, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_grad, relative_error

__all__ = [
    "MASK_VALUE", "Tensor", "add", "as_tensor", "bce_loss", "bce_sum_and_mean", "clamp", "concat_lastdim",
    "dropout", "embedding_lookup", "get_default_dtype", "layernorm", "linear", "log", "masked_rows", "matmul",
    "mul", "no_grad", "relu", "reshape", "set_default_dtype", "sigmoid", "softmax_lastdim", "sub", "transpose",
    "tmean", "tsum", "AdamState", "adam_step", "clip_grad_norm", "zero_grads", "load_checkpoint",
    "save_checkpoint", "check_gradients", "numerical_grad", "relative_error",
]
