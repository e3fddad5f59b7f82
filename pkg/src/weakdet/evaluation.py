"""Detection metrics and report emission.

Implements the PASCAL-style average precision (all-point interpolation by
default, 11-point available for cross-checking), a COCO-style sweep over IoU
thresholds 0.50:0.05:0.95 with small/medium/large area buckets, and the
correct-localization score.  Classes with no ground truth yield None
("undefined") rather than a silent zero.

Desk-scale protocol notes: a detection matches a ground-truth box when
IoU >= threshold; each ground truth is matched at most once, greedily in
detection-score order; the area buckets restrict both ground truth and
detections to the range (the public protocol's ignore-flag machinery is not
reproduced); at most 100 detections per image enter the COCO sweep.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .geometry import box_area, iou

COCO_SWEEP_THRESHOLDS = tuple(i / 100 for i in range(50, 100, 5))
AREA_BUCKETS = {"small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, float("inf"))}
MAX_DETS_PER_IMAGE = 100


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: tuple[float, float, float, float]
    label: int
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    box: tuple[float, float, float, float]
    label: int


def average_precision(
    dets: list[Detection],
    gts: list[GroundTruthBox],
    iou_threshold: float = 0.5,
    eleven_point: bool = False,
) -> float | None:
    """AP for a single class; None when the class has no ground truth.

    Detections are ranked by score (ties keep input order); each detection
    greedily claims the best-IoU unmatched ground truth in its image.
    """
    if not gts:
        return None
    if not dets:
        return 0.0
    gt_by_image: dict[str, list[int]] = defaultdict(list)
    for j, gt in enumerate(gts):
        gt_by_image[gt.image_id].append(j)
    matched = np.zeros(len(gts), dtype=bool)

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j in gt_by_image.get(det.image_id, ()):
            overlap = iou(det.box, gts[j].box)
            if overlap > best_iou:
                best_iou, best_j = overlap, j
        if best_j >= 0 and best_iou >= iou_threshold and not matched[best_j]:
            matched[best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    if eleven_point:
        levels = [i / 10 for i in range(11)]
        vals = []
        for level in levels:
            mask = recall >= level
            vals.append(float(precision[mask].max()) if np.any(mask) else 0.0)
        return float(np.mean(vals))

    # all-point interpolation: area under the precision envelope
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _split_by_label(items, num_classes):
    buckets = [[] for _ in range(num_classes)]
    for item in items:
        if 0 <= item.label < num_classes:
            buckets[item.label].append(item)
    return buckets


def detection_map(
    dets: list[Detection],
    gts: list[GroundTruthBox],
    num_classes: int,
    iou_threshold: float = 0.5,
    eleven_point: bool = False,
) -> tuple[list[float | None], float | None]:
    """Per-class AP plus the mean over classes with defined AP."""
    det_b = _split_by_label(dets, num_classes)
    gt_b = _split_by_label(gts, num_classes)
    per_class = [
        average_precision(det_b[c], gt_b[c], iou_threshold, eleven_point) for c in range(num_classes)
    ]
    defined = [ap for ap in per_class if ap is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def corloc(per_image_top: list[Detection], gts: list[GroundTruthBox], iou_threshold: float = 0.5) -> float | None:
    """Fraction of class-positive images whose top detection hits a ground truth.

    ``per_image_top`` holds at most one detection per image (the class's
    top-scoring one); images with ground truth but no detection count as
    misses.  None when no image contains the class.
    """
    gt_by_image: dict[str, list[GroundTruthBox]] = defaultdict(list)
    for gt in gts:
        gt_by_image[gt.image_id].append(gt)
    if not gt_by_image:
        return None
    top_by_image = {d.image_id: d for d in per_image_top}
    hits = 0
    for image_id, image_gts in gt_by_image.items():
        det = top_by_image.get(image_id)
        if det is not None and any(iou(det.box, gt.box) >= iou_threshold for gt in image_gts):
            hits += 1
    return hits / len(gt_by_image)


def top_detections_per_image(dets: list[Detection]) -> list[Detection]:
    """Highest-scoring detection per image (ties keep the earlier one)."""
    best: dict[str, Detection] = {}
    for det in dets:
        cur = best.get(det.image_id)
        if cur is None or det.score > cur.score:
            best[det.image_id] = det
    return list(best.values())


def corloc_table(
    dets: list[Detection], gts: list[GroundTruthBox], num_classes: int, iou_threshold: float = 0.5
) -> tuple[list[float | None], float | None]:
    det_b = _split_by_label(dets, num_classes)
    gt_b = _split_by_label(gts, num_classes)
    per_class = [
        corloc(top_detections_per_image(det_b[c]), gt_b[c], iou_threshold) for c in range(num_classes)
    ]
    defined = [v for v in per_class if v is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def _cap_per_image(dets: list[Detection], limit: int) -> list[Detection]:
    by_image: dict[str, list[Detection]] = defaultdict(list)
    for det in dets:
        by_image[det.image_id].append(det)
    capped = []
    for image_dets in by_image.values():
        image_dets.sort(key=lambda d: -d.score)
        capped.extend(image_dets[:limit])
    return capped


def _in_bucket(box, lo: float, hi: float) -> bool:
    return lo <= box_area(box) < hi


def coco_ap_sweep(dets: list[Detection], gts: list[GroundTruthBox], num_classes: int) -> dict:
    """Mean AP over IoU thresholds 0.50:0.05:0.95 plus convenience slices.

    Returns a dict with keys ap (the sweep mean), ap50, ap75, per-threshold
    values, and small/medium/large area-bucket sweep means.
    """
    dets = _cap_per_image(dets, MAX_DETS_PER_IMAGE)

    def sweep(d, g):
        means = []
        for thr in COCO_SWEEP_THRESHOLDS:
            _, mean = detection_map(d, g, num_classes, iou_threshold=thr)
            means.append(mean)
        defined = [m for m in means if m is not None]
        return means, (float(np.mean(defined)) if defined else None)

    per_thr, ap = sweep(dets, gts)
    out = {
        "ap": ap,
        "ap50": per_thr[0],
        "ap75": per_thr[5],
        "thresholds": list(COCO_SWEEP_THRESHOLDS),
        "per_threshold": per_thr,
    }
    for name, (lo, hi) in AREA_BUCKETS.items():
        bucket_gts = [g for g in gts if _in_bucket(g.box, lo, hi)]
        bucket_dets = [d for d in dets if _in_bucket(d.box, lo, hi)]
        _, bucket_ap = sweep(bucket_dets, bucket_gts)
        out[f"ap_{name}"] = bucket_ap
    return out


# ---------------------------------------------------------------------------
# detection dump files


def write_detection_dump(path, dets: list[Detection], class_names: list[str]) -> None:
    """One TSV record per detection with fixed decimal formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in dets:
            x1, y1, x2, y2 = det.box
            fh.write(
                f"{det.image_id}\t{class_names[det.label]}\t{det.score:.6f}"
                f"\t{x1:.2f}\t{y1:.2f}\t{x2:.2f}\t{y2:.2f}\n"
            )


def read_detection_dump(path, class_names: list[str]) -> list[Detection]:
    index = {name: i for i, name in enumerate(class_names)}
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 tab-separated fields")
            image_id, name, score, x1, y1, x2, y2 = parts
            if name not in index:
                raise ValueError(f"{path}:{lineno}: unknown class {name!r}")
            dets.append(
                Detection(image_id, (float(x1), float(y1), float(x2), float(y2)), index[name], float(score))
            )
    return dets


# ---------------------------------------------------------------------------
# reports


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_report_text(report: dict) -> str:
    lines = [f"protocol: {report['protocol']}"]
    rows = report.get("per_class")
    if rows:
        width = max(len(r["class"]) for r in rows) + 2
        for row in rows:
            metrics = "  ".join(f"{k}={_fmt(v)}" for k, v in row.items() if k != "class")
            lines.append(f"  {row['class']:<{width}}{metrics}")
    for key, value in report.items():
        if key in ("protocol", "per_class"):
            continue
        lines.append(f"{key}: {_fmt(value) if isinstance(value, (float, type(None))) else value}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, stem: str) -> tuple[str, str]:
    """Emit machine-readable JSON and a human-readable text table."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, stem + ".json")
    text_path = os.path.join(out_dir, stem + ".txt")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(text_path, "w", encoding="utf-8") as fh:
        fh.write(render_report_text(report))
    return json_path, text_path


def plot_pr_curves(dets, gts, class_names, path, iou_threshold: float = 0.5) -> None:
    """Optional PR-curve plot; requires the 'plots' extra (matplotlib)."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("PR plots need matplotlib; install the 'plots' extra") from exc

    fig, ax = plt.subplots(figsize=(6, 5))
    det_b = _split_by_label(dets, len(class_names))
    gt_b = _split_by_label(gts, len(class_names))
    for c, name in enumerate(class_names):
        if not gt_b[c]:
            continue
        order = sorted(det_b[c], key=lambda d: -d.score)
        matched = set()
        tp = 0
        points = []
        gt_by_image = defaultdict(list)
        for j, gt in enumerate(gt_b[c]):
            gt_by_image[gt.image_id].append(j)
        for rank, det in enumerate(order, start=1):
            best_iou, best_j = 0.0, -1
            for j in gt_by_image.get(det.image_id, ()):
                overlap = iou(det.box, gt_b[c][j].box)
                if overlap > best_iou:
                    best_iou, best_j = overlap, j
            if best_j >= 0 and best_iou >= iou_threshold and best_j not in matched:
                matched.add(best_j)
                tp += 1
            points.append((tp / len(gt_b[c]), tp / rank))
        if points:
            ax.plot([p[0] for p in points], [p[1] for p in points], label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
