"""Minimal dense-tensor core: autodiff, fused kernels, optimizer."""

from .functional import (
    bce_with_logits,
    bilstm,
    clamp_passthrough,
    concat,
    fold,
    gelu,
    layer_norm,
    linear,
    pad_tail,
    relu,
    sigmoid,
    softmax,
    stack,
    unfold,
)
from .gradcheck import check_gradients, max_relative_error, numeric_grad
from .module import Module, Parameter
from .optim import (
    OptimizerState,
    PlateauScheduler,
    adamw_step,
    clip_global_norm,
    clip_grad_norm_,
    global_norm,
    plateau_step,
)
from .tensor import Tensor, as_tensor, count_macs, is_grad_enabled, matmul, no_grad

__all__ = [
    "Module", "OptimizerState", "Parameter", "PlateauScheduler", "Tensor",
    "adamw_step", "as_tensor", "bce_with_logits", "bilstm", "check_gradients",
    "clamp_passthrough", "clip_global_norm", "clip_grad_norm_", "concat", "count_macs",
    "fold", "gelu", "global_norm", "is_grad_enabled", "layer_norm", "linear", "matmul",
    "max_relative_error", "no_grad", "numeric_grad", "pad_tail", "plateau_step", "relu",
    "sigmoid", "softmax", "stack", "unfold",
]
