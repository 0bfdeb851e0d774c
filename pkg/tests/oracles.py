"""Independent brute-force reference implementations used as test oracles.

These deliberately share no code with the library paths they check: plain
Python loops and exhaustive enumeration only.
"""

import itertools
import math


def iou_ref(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1])
    ub = (b[2] - b[0]) * (b[3] - b[1])
    union = ua + ub - inter
    return inter / union if union > 0 else 0.0


def nms_ref(boxes, scores, classes, iou_thr):
    """Greedy NMS, pure double loop. Returns kept indices in score order
    (ties by index)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if classes[i] == classes[j] and iou_ref(boxes[i], boxes[j]) > iou_thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def ap_ref(image_dets, image_gts, iou_thr):
    """All-point-interpolated AP by explicit PR-curve construction.

    image_dets: per image list of (box, score); image_gts: per image list
    of boxes. Matching: detections in global descending score order claim
    the unmatched GT of highest IoU >= thr within their image.
    """
    n_gt = sum(len(g) for g in image_gts)
    if n_gt == 0:
        return None
    flat = []
    for img, dets in enumerate(image_dets):
        for d_idx, (box, score) in enumerate(dets):
            flat.append((score, img, d_idx, box))
    # stable order: score desc, then image, then index (mirrors library tie rule)
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    taken = [set() for _ in image_gts]
    points = []
    tp = fp = 0
    for score, img, _, box in flat:
        best_iou, best_j = -1.0, None
        for j, gt in enumerate(image_gts[img]):
            if j in taken[img]:
                continue
            v = iou_ref(box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j is not None and best_iou >= iou_thr:
            taken[img].add(best_j)
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    # precision envelope integrated across recall increments
    ap = 0.0
    prev_recall = 0.0
    for k, (r, _) in enumerate(points):
        env = max(p for rr, p in points[k:] )
        ap += (r - prev_recall) * env
        prev_recall = r
    return ap


def pq_ref(gt_masks, pred_masks):
    """PQ by exhaustive matching: all (gt, pred) pairs with IoU > 0.5.
    gt_masks/pred_masks: lists of boolean pixel sets (frozenset of (r,c))."""
    pairs = []
    for gi, g in enumerate(gt_masks):
        for pi, p in enumerate(pred_masks):
            inter = len(g & p)
            union = len(g | p)
            if union and inter / union > 0.5:
                pairs.append((gi, pi, inter / union))
    # IoU > 0.5 matches are provably one-to-one; verify while summing
    gs = [g for g, _, _ in pairs]
    ps = [p for _, p, _ in pairs]
    assert len(gs) == len(set(gs)) and len(ps) == len(set(ps))
    tp = len(pairs)
    iou_sum = sum(v for _, _, v in pairs)
    fp = len(pred_masks) - tp
    fn = len(gt_masks) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    return iou_sum / denom if denom else 1.0


def hungarian_ref(cost):
    """Exhaustive minimum-cost assignment over all permutations (small n).
    Returns the optimal total cost matching rows to columns (rect ok)."""
    n, m = len(cost), len(cost[0]) if cost else 0
    if n == 0 or m == 0:
        return 0.0, []
    rows = list(range(n))
    best = (math.inf, [])
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            total = sum(cost[r][perm[r]] for r in rows)
            if total < best[0]:
                best = (total, list(zip(rows, perm)))
    else:
        for perm in itertools.permutations(range(n), m):
            total = sum(cost[perm[c]][c] for c in range(m))
            if total < best[0]:
                best = (total, [(perm[c], c) for c in range(m)])
    return best


def dice_ref(a_count, b_count, inter):
    total = a_count + b_count
    return 1.0 if total == 0 else 2.0 * inter / total
