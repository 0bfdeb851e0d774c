"""From raw head outputs to final detections (decode, clip, NMS), box-prompt
emission, and instance-map assembly from per-box masks (ellipse/rectangle
stub or an external mask decoder)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .head import decode_deltas


@dataclass
class Detection:
    box: np.ndarray          # [x1,y1,x2,y2] float64, image pixels
    class_id: int            # 1..K
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, np.float64).reshape(4)
        if not (self.box[0] < self.box[2] and self.box[1] < self.box[3]):
            raise ValueError(f"degenerate detection box {self.box.tolist()}")


def decode_and_filter(
    logits: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    image_size: int,
    score_thr: float = 0.05,
    max_det: int = 1000,
) -> list[Detection]:
    """Sigmoid scores, inverse delta decode, clip to image, drop low scores,
    keep the top max_det (pre-NMS). logits [A,K], deltas [A,4]."""
    logits = np.asarray(logits, np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits))
    a, k = scores.shape
    flat = scores.reshape(-1)
    keep = np.nonzero(flat >= score_thr)[0]
    if len(keep) == 0:
        return []
    if len(keep) > max_det:
        keep = keep[np.argsort(-flat[keep], kind="stable")[:max_det]]
    anchor_idx = keep // k
    class_idx = keep % k
    boxes = decode_deltas(np.asarray(anchors)[anchor_idx], np.asarray(deltas)[anchor_idx])
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, image_size)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, image_size)
    dets = []
    for box, cls, s in zip(boxes, class_idx, flat[keep]):
        if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
            continue  # degenerate after clipping
        dets.append(Detection(box, int(cls) + 1, float(s)))
    dets.sort(key=lambda d: -d.score)
    return dets


def nms(detections: list[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Greedy class-wise suppression at IoU > iou_thr; output in descending
    score order. Equal scores tie-break on input index, so the result is
    input-order independent up to such ties."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    if not order:
        return []
    boxes = np.stack([detections[i].box for i in order])
    classes = np.array([detections[i].class_id for i in order])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    alive = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = np.nonzero(alive)[0]
        rest = rest[rest > i]
        if len(rest) == 0:
            break
        same = rest[classes[rest] == classes[i]]
        if len(same) == 0:
            continue
        ix = np.maximum(0.0, np.minimum(boxes[same, 2], boxes[i, 2]) - np.maximum(boxes[same, 0], boxes[i, 0]))
        iy = np.maximum(0.0, np.minimum(boxes[same, 3], boxes[i, 3]) - np.maximum(boxes[same, 1], boxes[i, 1]))
        inter = ix * iy
        union = areas[same] + areas[i] - inter
        iou = np.where(union > 0, inter / union, 0.0)
        alive[same[iou > iou_thr]] = False
    return [detections[i] for i in kept]


# ---------------------------------------------------------------------------
# prompt files


@dataclass
class PromptFile:
    """Final detections serialized as box prompts for the mask decoder."""

    image_id: str
    detections: list[Detection] = field(default_factory=list)

    def __post_init__(self):
        self.detections = sorted(self.detections, key=lambda d: -d.score)

    def to_payload(self) -> dict:
        return {
            "image_id": self.image_id,
            "boxes": [
                {
                    "x1": float(d.box[0]), "y1": float(d.box[1]),
                    "x2": float(d.box[2]), "y2": float(d.box[3]),
                    "class": int(d.class_id), "score": float(d.score),
                }
                for d in self.detections
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_payload(), indent=1))

    @classmethod
    def load(cls, path) -> "PromptFile":
        payload = json.loads(Path(path).read_text())
        dets = [
            Detection(np.array([b["x1"], b["y1"], b["x2"], b["y2"]]), int(b["class"]), float(b["score"]))
            for b in payload["boxes"]
        ]
        return cls(payload["image_id"], dets)


def emit_prompts(detections: list[Detection], image_id: str, path) -> PromptFile:
    pf = PromptFile(image_id, list(detections))
    pf.save(path)
    return pf


# ---------------------------------------------------------------------------
# mask assembly


def stub_mask_decoder(detections: list[Detection], image_size: int, mode: str = "ellipse") -> np.ndarray:
    """Deterministic stand-in mask head: fills each box's inscribed ellipse
    (nuclei prior) or the full rectangle. Returns [N,H,W] uint8 in prompt
    order."""
    if mode not in ("ellipse", "rectangle"):
        raise ValueError(f"unknown stub mode {mode!r}")
    h = w = image_size
    masks = np.zeros((len(detections), h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    cy_pix = yy + 0.5
    cx_pix = xx + 0.5
    for i, det in enumerate(detections):
        x1, y1, x2, y2 = det.box
        if mode == "rectangle":
            masks[i] = (cx_pix >= x1) & (cx_pix < x2) & (cy_pix >= y1) & (cy_pix < y2)
        else:
            rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            # strict: tangent pixels would escape the rectangle test
            masks[i] = ((cx_pix - cx) / rx) ** 2 + ((cy_pix - cy) / ry) ** 2 < 1.0
    return masks


@dataclass
class InstanceSegmentation:
    """Dense instance-id map (0 background) plus per-instance class/score."""

    label_map: np.ndarray                 # [H,W] int32
    classes: np.ndarray                   # [N] int, index i -> id i+1
    scores: np.ndarray                    # [N] float

    def __post_init__(self):
        self.label_map = np.asarray(self.label_map, np.int32)
        self.classes = np.asarray(self.classes, np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, np.float64).reshape(-1)
        n = len(self.classes)
        if len(self.scores) != n:
            raise ValueError("classes and scores disagree on instance count")
        ids = np.unique(self.label_map)
        ids = ids[ids > 0]
        if len(ids) and (ids.max() > n or ids.min() < 1):
            raise ValueError(f"label map ids {ids.tolist()} exceed instance table of size {n}")
        if list(ids) != list(range(1, len(ids) + 1)):
            raise ValueError(f"instance ids must be dense 1..N, got {ids.tolist()}")
        if len(ids) != n:
            raise ValueError(f"{n} instances declared but {len(ids)} present in map")

    @property
    def num_instances(self) -> int:
        return len(self.classes)

    def binary_mask(self) -> np.ndarray:
        return self.label_map > 0

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.label_map == instance_id


def merge_masks(masks: np.ndarray, classes, scores) -> InstanceSegmentation:
    """Resolve overlaps by score: each pixel goes to the highest-score
    instance claiming it; instances that lose all pixels are dropped and ids
    renumbered densely (descending score, ties by input index)."""
    masks = np.asarray(masks).astype(bool)
    classes = np.asarray(classes, np.int64).reshape(-1)
    scores = np.asarray(scores, np.float64).reshape(-1)
    if masks.ndim != 3 or len(masks) != len(classes) or len(classes) != len(scores):
        raise ValueError("masks/classes/scores disagree on instance count")
    n, h, w = masks.shape
    label = np.zeros((h, w), dtype=np.int32)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    # paint lowest priority first so higher scores overwrite on overlap
    for i in reversed(order):
        label[masks[i]] = i + 1

    kept = [i for i in order if (label == i + 1).any()]
    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, i in enumerate(kept, start=1):
        remap[i + 1] = new_id
    return InstanceSegmentation(
        remap[label],
        np.array([classes[i] for i in kept], dtype=np.int64),
        np.array([scores[i] for i in kept], dtype=np.float64),
    )
