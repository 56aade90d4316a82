from .tensor import Tensor, no_grad, grad_enabled, add, sub, mul, tensor_sum, reshape, transpose, sigmoid
from .ops import (
    conv2d,
    batchnorm2d,
    maxpool2d,
    concat_channels,
    heaviside_surrogate,
    softmax_cross_entropy,
    focal_loss,
    smooth_l1,
)
from .optim import AdamW, adamw_step, cosine_lr, clip_grad_norm, kaiming_uniform_init
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "tensor_sum",
    "reshape",
    "transpose",
    "sigmoid",
    "conv2d",
    "batchnorm2d",
    "maxpool2d",
    "concat_channels",
    "heaviside_surrogate",
    "softmax_cross_entropy",
    "focal_loss",
    "smooth_l1",
    "AdamW",
    "adamw_step",
    "cosine_lr",
    "clip_grad_norm",
    "kaiming_uniform_init",
    "save_checkpoint",
    "load_checkpoint",
]
