"""Minimal reverse-mode automatic differentiation."""

from .check import GradcheckReport, directional_check, gradcheck
from .ops import (
    add_channel_bias,
    concat,
    conv1x1,
    conv_freq_dilated,
    conv_time,
    downsample,
    film_scale,
    gelu,
    group_norm_shift_free,
    linear,
    linear_map,
    mean,
    mse,
    reshape,
    scale,
    slice_axis,
    split,
    square,
    sum,
    upsample,
)
from .tensor import Tensor, add, as_tensor, backward, mul, neg, no_grad, set_check_finite

__all__ = [
    "GradcheckReport", "Tensor", "add", "add_channel_bias", "as_tensor", "backward", "concat",
    "conv1x1", "conv_freq_dilated", "conv_time", "directional_check", "downsample",
    "film_scale", "gelu", "gradcheck", "group_norm_shift_free", "linear", "linear_map", "mean",
    "mse", "mul", "neg", "no_grad", "reshape", "scale", "set_check_finite", "slice_axis",
    "split", "square", "sum", "upsample",
]
