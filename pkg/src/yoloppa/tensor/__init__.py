from . import ops, profile
from .core import (
    NonFiniteError,
    Precision,
    TapeError,
    Tensor,
    TensorError,
    default_dtype,
    get_precision,
    is_grad_enabled,
    no_grad,
    precision,
    set_precision,
)
from .gradcheck import GradCheckReport, gradient_check
from .ops import (
    adaptive_avg_pool,
    batchnorm2d,
    concat,
    conv2d,
    elementwise,
    expand,
    linear,
    pool2d,
    reshape,
    slice_channels,
    softmax,
    upsample_nearest,
)

__all__ = [
    "GradCheckReport", "NonFiniteError", "Precision", "TapeError", "Tensor", "TensorError",
    "adaptive_avg_pool", "batchnorm2d", "concat", "conv2d", "default_dtype", "elementwise",
    "expand", "get_precision", "gradient_check", "is_grad_enabled", "linear", "no_grad", "ops",
    "pool2d", "precision", "profile", "reshape", "set_precision", "slice_channels", "softmax",
    "upsample_nearest",
]
