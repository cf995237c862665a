from .tensor import NonFiniteError, Tensor, is_grad_enabled, no_grad
from .ops import (
    ShapeError,
    add,
    batch_norm2d,
    bilinear_resize,
    bilinear_upsample,
    concat_channels,
    conv2d,
    elementwise,
    global_avg_pool2d,
    max_pool2d,
    mean_all,
    mul,
    pool2d,
    relu,
    softmax_channel,
    sum_all,
)
from .gradcheck import gradient_check

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "batch_norm2d",
    "bilinear_resize",
    "bilinear_upsample",
    "concat_channels",
    "conv2d",
    "elementwise",
    "global_avg_pool2d",
    "gradient_check",
    "is_grad_enabled",
    "max_pool2d",
    "mean_all",
    "mul",
    "no_grad",
    "pool2d",
    "relu",
    "softmax_channel",
    "sum_all",
]
