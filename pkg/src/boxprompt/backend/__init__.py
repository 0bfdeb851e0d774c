"""Minimal dense-tensor backend: values, tape autograd, layers, Adam, TSR1 io."""

from . import ops
from .gradcheck import check_input_gradients, check_parameter_gradients
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, LayerSpec, he_uniform
from .optim import Adam, NonFiniteGradient
from .ops import (
    RunningStats,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_output_extent,
    downsample2x,
    linear1x1,
    mul_const,
    relu,
    subsample2x,
    sum_all,
    upsample2x,
)
from .tape import Tape, active_tape
from .tensor import Parameter, ShapeError, Tensor, as_array
from .tsr import TsrFormatError, read_tsr, tensor_from_bytes, tensor_to_bytes, write_tsr

__all__ = [
    "Adam", "BatchNorm2d", "Conv2d", "ConvBnRelu", "LayerSpec", "NonFiniteGradient",
    "Parameter", "RunningStats", "ShapeError", "Tape", "Tensor", "TsrFormatError",
    "active_tape", "add", "as_array", "batchnorm2d", "check_input_gradients",
    "check_parameter_gradients", "concat_channels", "conv2d", "conv_output_extent",
    "downsample2x", "he_uniform", "linear1x1", "mul_const", "ops", "read_tsr", "relu",
    "subsample2x", "sum_all", "tensor_from_bytes", "tensor_to_bytes", "upsample2x",
    "write_tsr",
]
