"""Float64 tensor core: autodiff, attention primitives, Adam, gradient oracle."""

from .tensor import (
    Tensor,
    tensor,
    zeros,
    no_grad,
    add,
    mul,
    div,
    matmul,
    reshape,
    swapaxes,
    broadcast_to,
    tsum,
    tmean,
    tmax,
    exp,
    log,
    sqrt,
    erf,
    sigmoid,
    gelu,
    relu,
    softplus,
    concat,
    take_rows,
    where,
    stop_gradient,
    softmax,
    log_softmax,
    logsumexp,
    layer_norm,
    clip_values,
    l2_normalize,
)
from .nn import (
    ParamModule,
    ConfigurationError,
    uniform_param,
    zeros_param,
    AttentionParams,
    multi_head_attention,
    FeedForward,
    TransformerLayer,
    SelfAttention,
    key_padding_mask,
)
from .optim import AdamState, adam_step, clip_global_norm
from .gradcheck import finite_diff_check
from .checkpoint import save_arrays, load_arrays, CheckpointError

__all__ = [
    "Tensor", "tensor", "zeros", "no_grad",
    "add", "mul", "div", "matmul", "reshape", "swapaxes", "broadcast_to",
    "tsum", "tmean", "tmax", "exp", "log", "sqrt", "erf", "sigmoid", "gelu",
    "relu", "softplus", "concat", "take_rows", "where", "stop_gradient",
    "softmax", "log_softmax", "logsumexp", "layer_norm", "clip_values",
    "l2_normalize",
    "ParamModule", "ConfigurationError", "uniform_param", "zeros_param",
    "AttentionParams", "multi_head_attention", "FeedForward",
    "TransformerLayer", "SelfAttention", "key_padding_mask",
    "AdamState", "adam_step", "clip_global_norm",
    "finite_diff_check",
    "save_arrays", "load_arrays", "CheckpointError",
]
