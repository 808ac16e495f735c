"""Box overlap, non-maximum suppression and mAP@0.5."""

from dataclasses import dataclass

import numpy as np

__all__ = ["Detection", "iou", "nms", "average_precision", "map_at_05", "MetricError"]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) in pixels


def iou(a, b):
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes; 0 for degenerate boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def nms(detections, threshold=0.3):
    """Greedy per-class suppression of boxes with IoU > ``threshold`` against a kept box.

    Processing order is descending score, ties broken by input position. The
    result is sorted by descending score (stable).
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept = []
    for i in order:
        d = detections[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= threshold for k in kept):
            kept.append(d)
    return kept


def average_precision(hits, num_gt):
    """All-points interpolated AP from a ranked hit/miss sequence."""
    if num_gt <= 0:
        raise MetricError("AP undefined without ground truth")
    hits = np.asarray(hits, dtype=float)
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    # precision envelope, right to left
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _match_class(dets, gts, iou_threshold):
    """Rank detections ``(image, score, box)`` and mark each hit or miss."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {img: [False] * len(boxes) for img, boxes in gts.items()}
    hits = []
    for i in order:
        img, _, box = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(img, ())):
            if used[img][j]:
                continue
            ov = iou(box, g)
            # strict > keeps the lower gt index on ties
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_threshold:
            used[img][best_j] = True
            hits.append(1)
        else:
            hits.append(0)
    return hits


def map_at_05(detections, ground_truth, iou_threshold=0.5):
    """Mean AP over classes present in the ground truth.

    Args:
        detections: per image, a list of :class:`Detection` (already NMS'd).
        ground_truth: per image, a list of ``(class_id, box)``.

    Returns:
        ``(mAP, {class_id: AP})``.
    """
    if len(detections) != len(ground_truth):
        raise MetricError("detections and ground truth cover different image counts")
    classes = sorted({c for gts in ground_truth for c, _ in gts})
    if not classes:
        raise MetricError("no ground truth boxes: mAP undefined")
    per_class = {}
    for c in classes:
        gts = {img: [b for cc, b in g if cc == c] for img, g in enumerate(ground_truth)}
        num_gt = sum(len(v) for v in gts.values())
        dets = [(img, d.score, d.box) for img, ds in enumerate(detections) for d in ds if d.class_id == c]
        per_class[c] = average_precision(_match_class(dets, gts, iou_threshold), num_gt)
    return float(np.mean(list(per_class.values()))), per_class
