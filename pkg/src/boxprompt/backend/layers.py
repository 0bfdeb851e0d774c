"""Parameterized layer objects and declarative layer specs.

A LayerSpec can compute its output shape and parameter count without
allocating anything, so full-size networks can be sized analytically.
Layer classes hold Parameters and call the functional ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Parameter, ShapeError, Tensor

LAYER_KINDS = ("conv2d", "batchnorm2d", "relu", "upsample2x", "downsample2x", "add", "linear1x1")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative layer description; shape algebra only, no data."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        n, c, h, w = in_shape
        if self.kind in ("conv2d", "downsample2x"):
            if c != self.in_channels:
                raise ShapeError(f"{self.kind}: expected {self.in_channels} channels, got {c}")
            stride = 2 if self.kind == "downsample2x" else self.stride
            pad = 0 if self.kind == "downsample2x" else self.padding
            ho = ops.conv_output_extent(h, self.kernel, stride, pad)
            wo = ops.conv_output_extent(w, self.kernel, stride, pad)
            return (n, self.out_channels, ho, wo)
        if self.kind == "linear1x1":
            if c != self.in_channels:
                raise ShapeError(f"linear1x1: expected {self.in_channels} channels, got {c}")
            return (n, self.out_channels, h, w)
        if self.kind == "upsample2x":
            return (n, c, 2 * h, 2 * w)
        if self.kind in ("batchnorm2d", "relu", "add"):
            return in_shape
        raise AssertionError(self.kind)

    def parameter_count(self) -> int:
        b = self.out_channels if self.bias else 0
        if self.kind in ("conv2d", "downsample2x"):
            return self.out_channels * self.in_channels * self.kernel * self.kernel + b
        if self.kind == "linear1x1":
            return self.out_channels * self.in_channels + b
        if self.kind == "batchnorm2d":
            return 2 * self.in_channels
        return 0


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Conv layer with He-uniform weights and zero bias."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 trainable=True, name="conv", init_std: float | None = None,
                 bias: bool = True, bias_init: float = 0.0):
        self.spec = LayerSpec("conv2d", in_channels, out_channels, kernel, stride, padding, bias=bias)
        fan_in = in_channels * kernel * kernel
        rng = rng or np.random.default_rng(0)
        if init_std is None:
            w = he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        else:
            w = (rng.standard_normal((out_channels, in_channels, kernel, kernel)) * init_std).astype(dtype)
        self.weight = Parameter(Tensor(w), trainable=trainable, name=f"{name}.weight")
        if bias:
            b = np.full(out_channels, bias_init, dtype=dtype)
            self.bias = Parameter(Tensor(b), trainable=trainable, name=f"{name}.bias")
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d:
    """Batch normalization with gamma=1, beta=0 init and running buffers."""

    def __init__(self, channels, dtype=np.float32, trainable=True, name="bn",
                 momentum: float = 0.1, eps: float = 1e-5):
        self.spec = LayerSpec("batchnorm2d", channels, channels)
        self.gamma = Parameter(Tensor(np.ones(channels, dtype=dtype)), trainable=trainable, name=f"{name}.gamma")
        self.beta = Parameter(Tensor(np.zeros(channels, dtype=dtype)), trainable=trainable, name=f"{name}.beta")
        self.stats = ops.RunningStats(channels, dtype=dtype, momentum=momentum, eps=eps)
        self.name = name

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.stats, train)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.stats.mean), (f"{self.name}.running_var", self.stats.var)]


@dataclass
class ConvBnRelu:
    """conv -> BN -> ReLU stage used throughout the projection network."""

    conv: Conv2d
    bn: BatchNorm2d
    specs: list = field(default_factory=list)

    @classmethod
    def build(cls, in_ch, out_ch, rng, kernel=None, stride=1, dtype=np.float32, trainable=True, name="stage"):
        # stride-2 stages need an even kernel so the halved extent is exact;
        # no bias: the following BN's mean subtraction absorbs it exactly
        if kernel is None:
            kernel = 3 if stride == 1 else 2
        padding = kernel // 2 if stride == 1 else 0
        conv = Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False,
                      rng=rng, dtype=dtype, trainable=trainable, name=f"{name}.conv")
        bn = BatchNorm2d(out_ch, dtype=dtype, trainable=trainable, name=f"{name}.bn")
        return cls(conv, bn, [conv.spec, bn.spec])

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.relu(self.bn(self.conv(x), train))

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()
