"""Axis-aligned box geometry: IoU, greedy NMS, multi-scale score averaging.

Boxes are (x1, y1, x2, y2) with x1 < x2 and y1 < y2, in continuous pixel
coordinates; areas are (x2 - x1) * (y2 - y1) with no +1 convention.
"""

from __future__ import annotations

import numpy as np


def box_area(box) -> float:
    x1, y1, x2, y2 = box
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def iou(a, b) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return float(inter / union)


def iou_one_vs_many(box, boxes: np.ndarray) -> np.ndarray:
    """IoU of one box against each row of an (m, 4) array."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = box
    iw = np.minimum(x2, boxes[:, 2]) - np.maximum(x1, boxes[:, 0])
    ih = np.minimum(y2, boxes[:, 3]) - np.maximum(y1, boxes[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = box_area(box) + areas - inter
    return inter / union


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.4) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Score ties keep the earlier index first (stable sort), and a candidate is
    suppressed only when its IoU with an already-kept box strictly exceeds the
    threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        box = boxes[idx]
        if all(iou(box, boxes[k]) <= iou_threshold for k in kept):
            kept.append(int(idx))
    return kept


def average_multiscale(score_sets: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of per-scale score matrices for the same proposals."""
    if not score_sets:
        raise ValueError("no score sets to average")
    first = np.asarray(score_sets[0], dtype=np.float64)
    for s in score_sets[1:]:
        if np.asarray(s).shape != first.shape:
            raise ValueError(f"shape mismatch: {np.asarray(s).shape} vs {first.shape}")
    return np.mean([np.asarray(s, dtype=np.float64) for s in score_sets], axis=0)
