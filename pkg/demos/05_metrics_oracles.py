"""Metric semantics on tiny hand-checkable cases: IoU/dice, AP, centroid
matching with the Hungarian assignment, panoptic quality.

Run:  python3 demos/05_metrics_oracles.py
"""

import numpy as np

from boxprompt.metrics import (
    average_precision,
    box_iou,
    centroid_prf,
    dice,
    mask_iou,
    panoptic_quality,
    pq_image_stats,
)

print("== IoU and dice ==")
a, b = [0, 0, 10, 10], [1, 1, 11, 11]
print(f"IoU({a}, {b}) = {box_iou(a, b):.4f}  (81/119)")
ma = np.zeros((20, 20), bool); ma[:10, :10] = True
mb = np.zeros((20, 20), bool); mb[:10, 5:15] = True
i, d = mask_iou(ma, mb), dice(ma, mb)
print(f"mask IoU {i:.4f}, dice {d:.4f}, 2*IoU/(1+IoU) = {2 * i / (1 + i):.4f}")

print("\n== average precision ==")
gt = [np.array([[0, 0, 10, 10.0], [50, 50, 60, 60.0]])]
ap = average_precision([np.array([[0, 0, 10, 10.0]])], [np.array([0.9])], gt)
print(f"2 GT, 1 correct detection -> AP = {ap}")

print("\n== centroid matching ==")
det, per_class, conf = centroid_prf(
    [np.array([[5.0, 5.0], [40.0, 40.0]])], [np.array([1, 2])],
    [np.array([[6.0, 5.0], [80.0, 80.0]])], [np.array([1, 1])],
    num_classes=2, radius=12.0,
)
print(f"detection: TP={det.tp} FP={det.fp} FN={det.fn} F1={det.f1:.3f}")
print("confusion (rows GT, cols pred, 0 = background):")
print(conf)

print("\n== panoptic quality ==")
g = np.zeros((10, 10), np.int32); g[0:5, 0:2] = 1
p = np.zeros((10, 10), np.int32); p[1:5, 0:2] = 1
print(f"one pair at IoU 0.8 -> PQ = {pq_image_stats(g, p).pq:.3f}")
p2 = np.zeros((10, 10), np.int32); p2[0:2, 0:2] = 1
print(f"one pair at IoU 0.4 -> PQ = {pq_image_stats(g, p2).pq:.3f}  (below the 0.5 match threshold)")

gt_maps = [g]; gt_cls = [np.array([1])]
pr_maps = [p]; pr_cls = [np.array([1])]
print(f"binary PQ {panoptic_quality(gt_maps, gt_cls, pr_maps, pr_cls, 'binary'):.3f} == "
      f"multiclass PQ at K=1 "
      f"{panoptic_quality(gt_maps, gt_cls, pr_maps, pr_cls, 'multiclass', num_classes=1):.3f}")
