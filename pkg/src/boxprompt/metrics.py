"""Evaluation stack: box/mask IoU, dice, AP@0.5, centroid-matched per-class
P/R/F1 with Hungarian assignment, binary/multiclass panoptic quality, and
the confusion matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

# ---------------------------------------------------------------------------
# overlap measures


def box_iou(a, b) -> float:
    """IoU of two corner boxes [x1,y1,x2,y2]; empty union -> 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes: a [n,4], b [m,4] -> [n,m] float64."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.maximum(
        0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    )
    iy = np.maximum(
        0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    )
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B|/(|A|+|B|); both masks empty -> 1 by convention."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


# ---------------------------------------------------------------------------
# average precision


def _match_image_detections(boxes: np.ndarray, scores: np.ndarray, gt: np.ndarray, iou_thr: float):
    """Greedy per-image matching: each detection in descending score order
    claims the unmatched GT of highest IoU >= iou_thr. Returns bool TP flags."""
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(boxes), dtype=bool)
    if len(gt) == 0:
        return tp
    taken = np.zeros(len(gt), dtype=bool)
    ious = box_iou_matrix(boxes, gt)
    for i in order:
        free = ~taken
        if not free.any():
            break
        j = int(np.argmax(np.where(free, ious[i], -1.0)))
        if free[j] and ious[i, j] >= iou_thr:
            tp[i] = True
            taken[j] = True
    return tp


def average_precision(
    det_boxes: list[np.ndarray],
    det_scores: list[np.ndarray],
    gt_boxes: list[np.ndarray],
    iou_thr: float = 0.5,
) -> float | None:
    """AP at one IoU threshold with all-point (precision-envelope)
    interpolation; detections and GT are per-image lists. Returns None when
    the dataset holds no ground truth."""
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        return None
    scores_all, tps_all = [], []
    for boxes, scores, gt in zip(det_boxes, det_scores, gt_boxes):
        boxes = np.asarray(boxes, np.float64).reshape(-1, 4)
        scores = np.asarray(scores, np.float64).reshape(-1)
        tp = _match_image_detections(boxes, scores, np.asarray(gt, np.float64).reshape(-1, 4), iou_thr)
        scores_all.append(scores)
        tps_all.append(tp)
    scores_all = np.concatenate(scores_all) if scores_all else np.zeros(0)
    tps_all = np.concatenate(tps_all) if tps_all else np.zeros(0, bool)
    if len(scores_all) == 0:
        return 0.0
    order = np.argsort(-scores_all, kind="stable")
    tp_cum = np.cumsum(tps_all[order])
    fp_cum = np.cumsum(~tps_all[order])
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    # precision envelope, integrated over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def average_precision_per_class(
    det_boxes, det_scores, det_classes, gt_boxes, gt_classes, num_classes: int, iou_thr: float = 0.5
) -> dict[int, float | None]:
    """Per-class AP; classes are 1..K."""
    out = {}
    for c in range(1, num_classes + 1):
        db = [np.asarray(b, np.float64).reshape(-1, 4)[np.asarray(k, int).reshape(-1) == c]
              for b, k in zip(det_boxes, det_classes)]
        ds = [np.asarray(s, np.float64).reshape(-1)[np.asarray(k, int).reshape(-1) == c]
              for s, k in zip(det_scores, det_classes)]
        gb = [np.asarray(b, np.float64).reshape(-1, 4)[np.asarray(k, int).reshape(-1) == c]
              for b, k in zip(gt_boxes, gt_classes)]
        out[c] = average_precision(db, ds, gb, iou_thr)
    return out


# ---------------------------------------------------------------------------
# centroid matching (detection + classification scoring)

_FORBIDDEN = 1e9


@dataclass
class CentroidMatch:
    pairs: list[tuple[int, int]]         # (pred index, gt index), within radius
    unmatched_pred: list[int]
    unmatched_gt: list[int]


def match_centroids(pred: np.ndarray, gt: np.ndarray, radius: float = 12.0) -> CentroidMatch:
    """One-to-one assignment minimizing total distance (Hungarian); pairs
    farther than `radius` are forbidden."""
    pred = np.asarray(pred, np.float64).reshape(-1, 2)
    gt = np.asarray(gt, np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(gt) == 0:
        return CentroidMatch([], list(range(len(pred))), list(range(len(gt))))
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    cost = np.where(d <= radius, d, _FORBIDDEN)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if d[r, c] <= radius]
    matched_p = {r for r, _ in pairs}
    matched_g = {c for _, c in pairs}
    return CentroidMatch(
        pairs,
        [i for i in range(len(pred)) if i not in matched_p],
        [j for j in range(len(gt)) if j not in matched_g],
    )


@dataclass
class PrfStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def centroid_prf(
    pred_centroids: list[np.ndarray],
    pred_classes: list[np.ndarray],
    gt_centroids: list[np.ndarray],
    gt_classes: list[np.ndarray],
    num_classes: int,
    radius: float = 12.0,
) -> tuple[PrfStats, dict[int, PrfStats], np.ndarray]:
    """Detection-level stats, per-class stats (detection match first, then
    class agreement), and the (K+1)x(K+1) confusion matrix with background
    row/column at index 0."""
    det = PrfStats()
    per_class = {c: PrfStats() for c in range(1, num_classes + 1)}
    confusion = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)

    for pc, pk, gc, gk in zip(pred_centroids, pred_classes, gt_centroids, gt_classes):
        pk = np.asarray(pk, int).reshape(-1)
        gk = np.asarray(gk, int).reshape(-1)
        m = match_centroids(pc, gc, radius)
        det.tp += len(m.pairs)
        det.fp += len(m.unmatched_pred)
        det.fn += len(m.unmatched_gt)
        for pi, gi in m.pairs:
            confusion[gk[gi], pk[pi]] += 1
            if pk[pi] == gk[gi]:
                per_class[gk[gi]].tp += 1
            else:
                per_class[pk[pi]].fp += 1
                per_class[gk[gi]].fn += 1
        for pi in m.unmatched_pred:
            confusion[0, pk[pi]] += 1
            per_class[pk[pi]].fp += 1
        for gi in m.unmatched_gt:
            confusion[gk[gi], 0] += 1
            per_class[gk[gi]].fn += 1
    return det, per_class, confusion


# ---------------------------------------------------------------------------
# panoptic quality


def segment_pair_ious(gt_map: np.ndarray, pred_map: np.ndarray):
    """All overlapping (gt id, pred id) pairs with their IoU, plus per-id
    areas, via a joint histogram. Id 0 is background."""
    gt_map = np.asarray(gt_map, dtype=np.int64)
    pred_map = np.asarray(pred_map, dtype=np.int64)
    if gt_map.shape != pred_map.shape:
        raise ValueError(f"segmentation shapes differ: {gt_map.shape} vs {pred_map.shape}")
    g_max = int(gt_map.max(initial=0))
    p_max = int(pred_map.max(initial=0))
    g_area = np.bincount(gt_map.reshape(-1), minlength=g_max + 1)
    p_area = np.bincount(pred_map.reshape(-1), minlength=p_max + 1)
    joint = gt_map.reshape(-1) * (p_max + 1) + pred_map.reshape(-1)
    counts = np.bincount(joint, minlength=(g_max + 1) * (p_max + 1)).reshape(g_max + 1, p_max + 1)
    pairs = []
    gs, ps = np.nonzero(counts)
    for g, p in zip(gs, ps):
        if g == 0 or p == 0:
            continue
        inter = counts[g, p]
        union = g_area[g] + p_area[p] - inter
        pairs.append((int(g), int(p), float(inter / union)))
    return pairs, g_area, p_area


@dataclass
class PQStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def add(self, other: "PQStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 1.0  # nothing to segment and nothing predicted
        return self.iou_sum / denom


def pq_image_stats(gt_map: np.ndarray, pred_map: np.ndarray, iou_thr: float = 0.5) -> PQStats:
    """Segments match iff IoU strictly exceeds iou_thr (such a matching is
    unique for thresholds >= 0.5)."""
    pairs, g_area, p_area = segment_pair_ious(gt_map, pred_map)
    matched_g, matched_p = set(), set()
    iou_sum = 0.0
    for g, p, iou in pairs:
        if iou > iou_thr:
            matched_g.add(g)
            matched_p.add(p)
            iou_sum += iou
    n_gt = int((g_area[1:] > 0).sum())
    n_pred = int((p_area[1:] > 0).sum())
    tp = len(matched_g)
    return PQStats(tp=tp, fp=n_pred - tp, fn=n_gt - tp, iou_sum=iou_sum)


def _select_class(label_map: np.ndarray, classes: np.ndarray, cls: int) -> np.ndarray:
    """Keep only instances of one class; ids are renumbered densely."""
    classes = np.asarray(classes, int).reshape(-1)
    keep_ids = np.nonzero(classes == cls)[0] + 1
    out = np.zeros_like(label_map)
    for new_id, old_id in enumerate(keep_ids, start=1):
        out[label_map == old_id] = new_id
    return out


def panoptic_quality(
    gt_maps: list[np.ndarray],
    gt_classes: list[np.ndarray],
    pred_maps: list[np.ndarray],
    pred_classes: list[np.ndarray],
    mode: str = "binary",
    num_classes: int | None = None,
    average: str = "dataset",
    iou_thr: float = 0.5,
) -> float:
    """bPQ merges all classes; mPQ computes per-class PQ and averages over
    classes present in the ground truth. `average` picks the aggregation
    axis: per-class over the whole dataset (default) or per image."""
    if mode == "binary":
        acc = PQStats()
        for g, p in zip(gt_maps, pred_maps):
            acc.add(pq_image_stats(g, p, iou_thr))
        return acc.pq
    if mode != "multiclass":
        raise ValueError(f"unknown PQ mode {mode!r}")
    if num_classes is None:
        raise ValueError("multiclass PQ needs num_classes")

    present = sorted({int(c) for ks in gt_classes for c in np.asarray(ks, int).reshape(-1)})
    if not present:
        return 1.0 if all(len(np.asarray(k).reshape(-1)) == 0 for k in pred_classes) else 0.0

    if average == "dataset":
        pqs = []
        for cls in present:
            acc = PQStats()
            for g, gk, p, pk in zip(gt_maps, gt_classes, pred_maps, pred_classes):
                acc.add(pq_image_stats(_select_class(g, gk, cls), _select_class(p, pk, cls), iou_thr))
            pqs.append(acc.pq)
        return float(np.mean(pqs))
    if average == "image":
        per_image = []
        for g, gk, p, pk in zip(gt_maps, gt_classes, pred_maps, pred_classes):
            classes_here = sorted({int(c) for c in np.asarray(gk, int).reshape(-1)})
            if not classes_here:
                continue
            vals = [
                pq_image_stats(_select_class(g, gk, cls), _select_class(p, pk, cls), iou_thr).pq
                for cls in classes_here
            ]
            per_image.append(float(np.mean(vals)))
        return float(np.mean(per_image)) if per_image else 1.0
    raise ValueError(f"unknown averaging mode {average!r}")


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    ap: float | None = None
    ap_per_class: dict[int, float | None] = field(default_factory=dict)
    detection: dict | None = None              # P/R/F1 for centroid matching
    per_class: dict[int, dict] = field(default_factory=dict)
    bpq: float | None = None
    mpq: float | None = None
    dice: float | None = None
    confusion: list[list[int]] | None = None
    counts: dict | None = None

    def to_json(self, path=None) -> str:
        payload = {
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "ap": self.ap,
            "ap_per_class": {str(k): v for k, v in self.ap_per_class.items()},
            "detection": self.detection,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "bpq": self.bpq,
            "mpq": self.mpq,
            "dice": self.dice,
            "confusion": self.confusion,
            "counts": self.counts,
        }
        text = json.dumps(payload, indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def confusion_csv(self, path=None) -> str:
        if self.confusion is None:
            raise ValueError("no confusion matrix in report")
        names = ["background"] + (
            self.class_names if self.class_names else [f"class{i}" for i in range(1, self.num_classes + 1)]
        )
        lines = ["gt\\pred," + ",".join(names)]
        for name, row in zip(names, self.confusion):
            lines.append(name + "," + ",".join(str(v) for v in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def prf_dict(s: PrfStats) -> dict:
    return {"tp": s.tp, "fp": s.fp, "fn": s.fn,
            "precision": s.precision, "recall": s.recall, "f1": s.f1}
