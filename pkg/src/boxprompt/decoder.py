"""Cascaded projection decoder: six projection layers turn the four encoder
blocks into a feature pyramid z1..z6 with a chained skip connection from the
first projection down to the fourth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import (
    ConvBnRelu,
    LayerSpec,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    ops,
    subsample2x,
    upsample2x,
)

SKIP_MODES = ("chain", "p1_to_p4", "none")
COMBINE_MODES = ("concat", "sum")


@dataclass(frozen=True)
class DecoderConfig:
    channels: int = 64        # pyramid width C (64 toy, 256 full scale)
    in_channels: int = 32     # encoder embedding dim D
    base_size: int = 16       # encoder grid size S
    combine: str = "concat"   # how the 3 block maps merge before projection
    skip_mode: str = "chain"

    def __post_init__(self):
        if self.channels <= 0:
            raise ShapeError("channels must be positive")
        if self.combine not in COMBINE_MODES:
            raise ShapeError(f"combine must be one of {COMBINE_MODES}")
        if self.skip_mode not in SKIP_MODES:
            raise ShapeError(f"skip_mode must be one of {SKIP_MODES}")
        if self.base_size % 16:
            raise ShapeError(f"base size {self.base_size} must be a multiple of 16 for the six-level chain")

    @property
    def level_sizes(self) -> tuple[int, ...]:
        s = self.base_size
        return (2 * s, s, s // 2, s // 4, s // 8, s // 16)


@dataclass
class FeaturePyramid:
    """Six projected maps at strictly decreasing spatial resolution."""

    levels: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != 6:
            raise ShapeError(f"pyramid needs 6 levels, got {len(self.levels)}")
        chans = {t.shape[-3] for t in self.levels}
        if len(chans) != 1:
            raise ShapeError(f"pyramid channel widths differ: {sorted(chans)}")
        sizes = [t.shape[-1] for t in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"pyramid spatial sizes must strictly decrease, got {sizes}")

    @property
    def spatial_sizes(self) -> tuple[int, ...]:
        return tuple(t.shape[-1] for t in self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-3]


# per projection layer: stride of each of the three stages, plus a trailing
# nearest-neighbor upsample for p1 ("up-sampling on the first projection layer")
_STAGE_STRIDES = {1: (1, 1, 1), 2: (1, 1, 1), 3: (1, 1, 2), 4: (1, 2, 2)}
_UPSAMPLE_AFTER = {1}


class ProjectionLayer:
    """Three conv+BN+ReLU stages with the level's resampling, then a dense
    conv -> ReLU -> BN stage that widens the receptive field."""

    def __init__(self, which: int, cfg: DecoderConfig, rng, dtype=np.float32, name=""):
        if which not in (1, 2, 3, 4):
            raise ShapeError(f"projection index {which} out of range")
        self.which = which
        self.cfg = cfg
        in_ch = 3 * cfg.in_channels if cfg.combine == "concat" else cfg.in_channels
        c = cfg.channels
        strides = _STAGE_STRIDES[which]
        self.stages = [
            ConvBnRelu.build(in_ch if i == 0 else c, c, rng, stride=strides[i], dtype=dtype,
                             name=f"{name}.stage{i + 1}")
            for i in range(3)
        ]
        self.dense_conv = _dense_conv(c, rng, dtype, f"{name}.dense")
        self.dense_bn = _dense_bn(c, dtype, f"{name}.dense")

    def __call__(self, block: list[Tensor], carry: Tensor | None, train: bool) -> Tensor:
        if len(block) != 3:
            raise ShapeError(f"projection expects 3 block maps, got {len(block)}")
        shapes = {t.shape for t in block}
        if len(shapes) != 1:
            raise ShapeError(f"block maps disagree on shape: {sorted(shapes)}")
        if self.cfg.combine == "concat":
            x = concat_channels(list(block))
        else:
            x = add(add(block[0], block[1]), block[2])
        for stage in self.stages:
            x = stage(x, train)
        if self.which in _UPSAMPLE_AFTER:
            x = upsample2x(x)
        x = self.dense_bn(ops.relu(self.dense_conv(x)), train)
        if carry is not None:
            x = add(x, carry)
        return x

    def parameters(self):
        params = []
        for s in self.stages:
            params += s.parameters()
        return params + self.dense_conv.parameters() + self.dense_bn.parameters()

    def buffers(self):
        out = []
        for s in self.stages:
            out += s.buffers()
        return out + self.dense_bn.buffers()


def _dense_conv(c, rng, dtype, name):
    from .backend import Conv2d

    return Conv2d(c, c, 3, padding=1, rng=rng, dtype=dtype, name=f"{name}.conv")


def _dense_bn(c, dtype, name):
    from .backend import BatchNorm2d

    return BatchNorm2d(c, dtype=dtype, name=f"{name}.bn")


class PyramidDecoder:
    """p1..p4 over the four encoder blocks plus p5/p6 extending z4."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32, name="decoder"):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.projections = [
            ProjectionLayer(j, cfg, rng, dtype=dtype, name=f"{name}.p{j}") for j in (1, 2, 3, 4)
        ]
        c = cfg.channels
        self.p5 = ConvBnRelu.build(c, c, rng, stride=2, dtype=dtype, name=f"{name}.p5")
        self.p6 = ConvBnRelu.build(c, c, rng, stride=2, dtype=dtype, name=f"{name}.p6")

    def extend_pyramid(self, z4: Tensor, train: bool = False) -> tuple[Tensor, Tensor]:
        size = z4.shape[-1]
        if size < 4:
            raise ShapeError(f"z4 spatial size {size} too small to derive z5/z6")
        if size % 4:
            raise ShapeError(f"z4 spatial size {size} must be divisible by 4")
        z5 = self.p5(z4, train)
        z6 = self.p6(z5, train)
        return z5, z6

    def forward(self, blocks: list[list[Tensor]], train: bool = False) -> FeaturePyramid:
        """blocks: 4 lists of 3 maps [N,D,S,S]. Train mode needs N >= 2:
        z6 is 1x1 spatial, so its batch-norm statistics are per-batch only."""
        if len(blocks) != 4:
            raise ShapeError(f"decoder expects 4 blocks, got {len(blocks)}")
        outs = []
        carry = None
        for j, (proj, block) in enumerate(zip(self.projections, blocks), start=1):
            if self.cfg.skip_mode == "chain":
                carry_in = subsample2x(carry) if carry is not None else None
            elif self.cfg.skip_mode == "p1_to_p4" and j == 4:
                # p1 output sits at 2S; three decimations reach S/4
                carry_in = subsample2x(subsample2x(subsample2x(outs[0])))
            else:
                carry_in = None
            out = proj(block, carry_in, train)
            outs.append(out)
            carry = out
        z5, z6 = self.extend_pyramid(outs[3], train)
        return FeaturePyramid(tuple(outs) + (z5, z6))

    def parameters(self) -> list[Parameter]:
        params = []
        for p in self.projections:
            params += p.parameters()
        return params + self.p5.parameters() + self.p6.parameters()

    def buffers(self):
        out = []
        for p in self.projections:
            out += p.buffers()
        return out + self.p5.buffers() + self.p6.buffers()


def count_parameters(params: list[Parameter], trainable_only: bool = True) -> int:
    return sum(p.value.size for p in params if p.trainable or not trainable_only)


def decoder_parameter_specs(cfg: DecoderConfig) -> list[LayerSpec]:
    """Shape-algebra-only layer listing, for sizing without allocation."""
    in_ch = 3 * cfg.in_channels if cfg.combine == "concat" else cfg.in_channels
    c = cfg.channels
    specs = []
    for j in (1, 2, 3, 4):
        for i, stride in enumerate(_STAGE_STRIDES[j]):
            if stride == 1:
                specs.append(LayerSpec("conv2d", in_ch if i == 0 else c, c, 3, 1, 1, bias=False))
            else:
                specs.append(LayerSpec("downsample2x", in_ch if i == 0 else c, c, 2, bias=False))
            specs.append(LayerSpec("batchnorm2d", c, c))
        specs.append(LayerSpec("conv2d", c, c, 3, 1, 1))
        specs.append(LayerSpec("batchnorm2d", c, c))
    for _ in (5, 6):
        specs.append(LayerSpec("downsample2x", c, c, 2, bias=False))
        specs.append(LayerSpec("batchnorm2d", c, c))
    return specs


def decoder_parameter_count(cfg: DecoderConfig) -> int:
    return sum(s.parameter_count() for s in decoder_parameter_specs(cfg))
