"""Anchor generation over the six pyramid levels, shared classification and
regression subnets, target assignment, and the training losses (sigmoid
focal loss plus smooth-L1 box regression)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import Conv2d, Parameter, ShapeError, Tensor, relu
from .backend.tape import active_tape
from .decoder import FeaturePyramid
from .metrics import box_iou_matrix


@dataclass(frozen=True)
class AnchorConfig:
    levels: int = 6
    # aspect ratios (a, b): width scales by a/b and height by b/a, so the
    # 1:2 anchor is half as wide and twice as tall as its 1:1 sibling at
    # equal area
    ratios: tuple[tuple[int, int], ...] = ((1, 2), (1, 1), (2, 1))
    scales: tuple[float, ...] = (1.0, 2 ** (1.0 / 3.0), 2 ** (2.0 / 3.0))
    base_multiplier: float = 4.0  # anchor base size = multiplier x stride

    @property
    def anchors_per_cell(self) -> int:
        return len(self.ratios) * len(self.scales)


def level_strides(pyramid_sizes: tuple[int, ...], image_size: int) -> tuple[int, ...]:
    strides = []
    for s in pyramid_sizes:
        if image_size % s:
            raise ShapeError(f"image size {image_size} not divisible by level size {s}")
        strides.append(image_size // s)
    return tuple(strides)


def generate_anchors(pyramid_sizes: tuple[int, ...], image_size: int, cfg: AnchorConfig) -> list[np.ndarray]:
    """Per-level anchor corner boxes [H*W*A, 4] (float64, image pixels),
    ordered row-major over cells then (ratio, scale)."""
    if len(pyramid_sizes) != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} pyramid levels, got {len(pyramid_sizes)}")
    strides = level_strides(pyramid_sizes, image_size)
    out = []
    for size, stride in zip(pyramid_sizes, strides):
        base = cfg.base_multiplier * stride
        shapes = []
        for (ra, rb) in cfg.ratios:
            for sc in cfg.scales:
                w = base * sc * (ra / rb)
                h = base * sc * (rb / ra)
                shapes.append((w, h))
        shapes = np.asarray(shapes, dtype=np.float64)  # [A,2]
        centers = (np.arange(size, dtype=np.float64) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        cxy = np.stack([cx, cy], axis=-1).reshape(size * size, 1, 2)  # [cells,1,2]
        half = shapes[None, :, :] / 2.0  # [1,A,2]
        boxes = np.concatenate([cxy - half, cxy + half], axis=2)  # [cells,A,4]
        out.append(boxes.reshape(-1, 4))
    return out


def anchor_count(pyramid_sizes: tuple[int, ...], cfg: AnchorConfig) -> int:
    return cfg.anchors_per_cell * sum(s * s for s in pyramid_sizes)


# ---------------------------------------------------------------------------
# box delta codec (float64 internally so encode/decode round-trips hold)


def encode_deltas(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) of boxes relative to anchors, on centers/sizes."""
    anchors = np.asarray(anchors, np.float64).reshape(-1, 4)
    boxes = np.asarray(boxes, np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gcx = boxes[:, 0] + gw / 2
    gcy = boxes[:, 1] + gh / 2
    if np.any(gw <= 0) or np.any(gh <= 0):
        bad = int(np.nonzero((gw <= 0) | (gh <= 0))[0][0])
        raise ValueError(f"degenerate box at index {bad}: zero or negative extent")
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, clamp: float = 4.0) -> np.ndarray:
    """Inverse of encode_deltas; dw/dh are clamped before exp for safety."""
    anchors = np.asarray(anchors, np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = aw * np.exp(np.clip(deltas[:, 2], -clamp, clamp))
    h = ah * np.exp(np.clip(deltas[:, 3], -clamp, clamp))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class BoxTargets:
    labels: np.ndarray        # [A] int: -1 ignore, 0 background, 1..K class
    deltas: np.ndarray        # [A,4] float32, defined where labels >= 1
    num_foreground: int

    @property
    def foreground_mask(self) -> np.ndarray:
        return self.labels >= 1


def match_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    fg_iou: float = 0.5,
    bg_iou: float = 0.4,
) -> BoxTargets:
    """RetinaNet-style assignment: IoU >= 0.5 foreground (best-overlap GT),
    < 0.4 background, in between ignored; every GT force-claims its single
    highest-IoU anchor."""
    anchors = np.asarray(anchors, np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, int).reshape(-1)
    a = len(anchors)
    labels = np.zeros(a, dtype=np.int64)
    deltas = np.zeros((a, 4), dtype=np.float32)
    if len(gt_boxes) == 0:
        return BoxTargets(labels, deltas, 0)

    widths = gt_boxes[:, 2] - gt_boxes[:, 0]
    heights = gt_boxes[:, 3] - gt_boxes[:, 1]
    if np.any(widths <= 0) or np.any(heights <= 0):
        bad = int(np.nonzero((widths <= 0) | (heights <= 0))[0][0])
        raise ValueError(f"degenerate ground-truth box at index {bad}")

    ious = box_iou_matrix(anchors, gt_boxes)  # [A,G]
    best_gt = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(a), best_gt]

    labels[best_iou < bg_iou] = 0
    labels[(best_iou >= bg_iou) & (best_iou < fg_iou)] = -1
    fg = best_iou >= fg_iou
    labels[fg] = gt_classes[best_gt[fg]]

    # each GT claims its single best anchor (ties broken by lowest index)
    forced = np.argmax(ious, axis=0)
    for g, aidx in enumerate(forced):
        labels[aidx] = gt_classes[g]
        best_gt[aidx] = g

    fg_mask = labels >= 1
    if fg_mask.any():
        deltas[fg_mask] = encode_deltas(anchors[fg_mask], gt_boxes[best_gt[fg_mask]]).astype(np.float32)
    return BoxTargets(labels, deltas, int(fg_mask.sum()))


# ---------------------------------------------------------------------------
# losses (fused autograd ops; gradients validated against finite differences)

_PT_FLOOR = 1e-12


def focal_loss(logits: Tensor, labels: np.ndarray, num_classes: int,
               alpha: float = 0.5, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss -alpha_t (1-p_t)^gamma log(p_t), summed over
    anchors x classes and normalized per image by max(1, #foreground).

    logits: [A,K] or [N,A,K]; labels: matching [A] or [N,A] with -1 ignore,
    0 background, 1..K foreground class ids. Batched input returns the mean
    of the per-image losses.
    """
    squeeze = len(logits.shape) == 2
    x = logits.data if not squeeze else logits.data[None]
    lab = np.asarray(labels, np.int64).reshape(x.shape[:2])
    n, a, k = x.shape
    if k != num_classes:
        raise ShapeError(f"logits have {k} classes, expected {num_classes}")

    valid = lab >= 0
    onehot = np.zeros((n, a, k), dtype=x.dtype)
    fg = lab >= 1
    idx = np.nonzero(fg)
    onehot[idx[0], idx[1], lab[fg] - 1] = 1.0

    p = 1.0 / (1.0 + np.exp(-x))
    p_t = p * onehot + (1.0 - p) * (1.0 - onehot)
    alpha_t = alpha * onehot + (1.0 - alpha) * (1.0 - onehot)
    one_minus = 1.0 - p_t
    terms = -alpha_t * one_minus**gamma * np.log(np.maximum(p_t, _PT_FLOOR))
    terms *= valid[:, :, None]

    norm = np.maximum(fg.sum(axis=1), 1).astype(x.dtype)  # [N]
    per_image = terms.sum(axis=(1, 2)) / norm
    out = Tensor._wrap(np.asarray(per_image.mean(), dtype=x.dtype))

    tape = active_tape()
    if tape is not None:
        def backward(g: np.ndarray):
            # dL/dx = s * alpha_t * [gamma p_t (1-p_t)^gamma log(p_t)
            #                        - (1-p_t)^(gamma+1)], s = +1 fg / -1 bg
            sign = 2.0 * onehot - 1.0
            log_pt = np.log(np.maximum(p_t, _PT_FLOOR))
            dx = sign * alpha_t * (gamma * p_t * one_minus**gamma * log_pt - one_minus ** (gamma + 1.0))
            dx *= valid[:, :, None]
            dx *= (g / (n * norm))[:, None, None]
            dx = dx.astype(x.dtype)
            return (dx[0] if squeeze else dx,)

        tape.record(out, (logits,), backward)
    return out


def box_loss(deltas: Tensor, targets: np.ndarray, fg_mask: np.ndarray, beta: float = 1.0 / 9.0) -> Tensor:
    """Smooth-L1 over foreground anchor deltas, summed and normalized per
    image by max(1, #foreground); batched input returns the mean."""
    squeeze = len(deltas.shape) == 2
    x = deltas.data if not squeeze else deltas.data[None]
    t = np.asarray(targets, x.dtype).reshape(x.shape)
    m = np.asarray(fg_mask, bool).reshape(x.shape[:2])
    n = x.shape[0]

    r = x - t
    absr = np.abs(r)
    quad = absr < beta
    elems = np.where(quad, 0.5 * r * r / beta, absr - 0.5 * beta)
    elems *= m[:, :, None]
    norm = np.maximum(m.sum(axis=1), 1).astype(x.dtype)
    per_image = elems.sum(axis=(1, 2)) / norm
    out = Tensor._wrap(np.asarray(per_image.mean(), dtype=x.dtype))

    tape = active_tape()
    if tape is not None:
        def backward(g: np.ndarray):
            dr = np.where(quad, r / beta, np.sign(r))
            dr *= m[:, :, None]
            dr *= (g / (n * norm))[:, None, None]
            dr = dr.astype(x.dtype)
            return (dr[0] if squeeze else dr,)

        tape.record(out, (deltas,), backward)
    return out


# ---------------------------------------------------------------------------
# head network


def classification_prior_bias(pi: float = 0.01) -> float:
    """Output bias so every anchor starts near foreground probability pi."""
    return -math.log((1.0 - pi) / pi)


class Subnet:
    """Four conv+ReLU stages then an output conv; shared across levels."""

    def __init__(self, channels: int, out_channels: int, rng, dtype=np.float32,
                 name="subnet", out_bias: float = 0.0):
        self.stages = [
            Conv2d(channels, channels, 3, padding=1, rng=rng, dtype=dtype, name=f"{name}.stage{i + 1}")
            for i in range(4)
        ]
        self.out = Conv2d(channels, out_channels, 3, padding=1, rng=rng, dtype=dtype,
                          name=f"{name}.out", init_std=0.01, bias_init=out_bias)

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.stages:
            x = relu(conv(x))
        return self.out(x)

    def parameters(self):
        params = []
        for c in self.stages:
            params += c.parameters()
        return params + self.out.parameters()


class DetectionHead:
    """Per-class sigmoid classification plus class-agnostic box regression
    over all pyramid levels; outputs are flattened in anchor order."""

    def __init__(self, channels: int, num_classes: int, anchor_cfg: AnchorConfig,
                 rng: np.random.Generator | None = None, dtype=np.float32, name="head"):
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.anchor_cfg = anchor_cfg
        a = anchor_cfg.anchors_per_cell
        self.cls_subnet = Subnet(channels, a * num_classes, rng, dtype=dtype,
                                 name=f"{name}.cls", out_bias=classification_prior_bias())
        self.reg_subnet = Subnet(channels, a * 4, rng, dtype=dtype, name=f"{name}.reg")

    def forward(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
        """-> (logits [N,A_total,K], deltas [N,A_total,4])."""
        if len(pyramid.levels) != self.anchor_cfg.levels:
            raise ShapeError(
                f"pyramid has {len(pyramid.levels)} levels, anchors expect {self.anchor_cfg.levels}"
            )
        a = self.anchor_cfg.anchors_per_cell
        k = self.num_classes
        logits, deltas = [], []
        for lvl in pyramid.levels:
            logits.append(_flatten_level(self.cls_subnet(lvl), a, k))
            deltas.append(_flatten_level(self.reg_subnet(lvl), a, 4))
        return _concat_anchor_axis(logits), _concat_anchor_axis(deltas)

    def parameters(self) -> list[Parameter]:
        return self.cls_subnet.parameters() + self.reg_subnet.parameters()


def _flatten_level(x: Tensor, a: int, per_anchor: int) -> Tensor:
    """[N, A*P, H, W] -> [N, H*W*A, P], matching the anchor ordering."""
    n, c, h, w = x.shape
    out = Tensor._wrap(
        np.ascontiguousarray(x.data.reshape(n, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2))
        .reshape(n, h * w * a, per_anchor)
    )
    tape = active_tape()
    if tape is not None:
        def backward(g: np.ndarray):
            dg = g.reshape(n, h, w, a, per_anchor).transpose(0, 3, 4, 1, 2).reshape(n, c, h, w)
            return (np.ascontiguousarray(dg),)

        tape.record(out, (x,), backward)
    return out


def _concat_anchor_axis(parts: list[Tensor]) -> Tensor:
    splits = np.cumsum([t.shape[1] for t in parts])[:-1]
    out = Tensor._wrap(np.concatenate([t.data for t in parts], axis=1))
    tape = active_tape()
    if tape is not None:
        def backward(g: np.ndarray):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

        tape.record(out, tuple(parts), backward)
    return out
