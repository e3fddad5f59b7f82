"""Stacked instance-classifier refinement.

Each refinement head is a (C+1)-way affine classifier over proposal features
(class C, the last column, is background).  Head k+1 is supervised by pseudo
instance labels built from head k's scores: per present image-level class, the
top-scoring proposal and every proposal overlapping it beyond an IoU threshold
become foreground for that class, everything else becomes background, and each
row is normalized to a distribution.  Targets are constants; no gradient flows
through their construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .captions import LabelSet
from .errors import NonFiniteScore
from .geometry import iou_one_vs_many
from .mil import EPS, ProposalSet, ScoreBundle, initial_scores


@dataclass
class RefinementHead:
    w: np.ndarray  # (d, C+1)
    b: np.ndarray  # (C+1,)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("refinement head has non-finite parameters")

    def copy(self) -> "RefinementHead":
        return RefinementHead(self.w.copy(), self.b.copy())


@dataclass
class RefinementStack:
    heads: list[RefinementHead]
    iou_threshold: float = 0.5

    def __post_init__(self):
        if len(self.heads) < 1:
            raise ValueError("a refinement stack needs at least one head")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")

    @property
    def depth(self) -> int:
        return len(self.heads)


@dataclass(frozen=True)
class InstanceTargets:
    """Row-stochastic (m, C+1) pseudo labels for one refinement step."""

    y_hat: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.y_hat, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("targets must be a 2-D matrix")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("target entries must lie in [0, 1]")
        if not np.allclose(arr.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("target rows must sum to 1")
        object.__setattr__(self, "y_hat", arr)


def init_refinement_stack(
    feature_dim: int, num_classes: int, depth: int, seed: int, iou_threshold: float = 0.5
) -> RefinementStack:
    heads = []
    s = 1.0 / np.sqrt(feature_dim)
    for k in range(depth):
        rng = np.random.default_rng([seed, 977, k])
        heads.append(
            RefinementHead(
                w=rng.uniform(-s, s, size=(feature_dim, num_classes + 1)),
                b=np.zeros(num_classes + 1),
            )
        )
    return RefinementStack(heads=heads, iou_threshold=iou_threshold)


def head_scores(features: np.ndarray, head: RefinementHead) -> np.ndarray:
    """Per-proposal softmax over the C+1 classes; rows sum to 1."""
    logits = features @ head.w + head.b
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    scores = ex / ex.sum(axis=1, keepdims=True)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteScore("refinement head produced non-finite scores")
    return scores


def instance_targets(
    boxes: np.ndarray, scores: np.ndarray, labels: LabelSet, iou_threshold: float
) -> InstanceTargets:
    """Pseudo instance labels from the previous iteration's detection scores.

    For each image-level class: the top-scoring proposal is the reference, and
    every proposal with IoU strictly above the threshold to it (including the
    reference itself, at IoU 1) becomes foreground for that class.  Proposals
    that end up with no foreground class get background = 1.  Rows are divided
    by their foreground count, so a row hit by t classes holds t entries of 1/t.

    Arg-max ties resolve to the lowest proposal index.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    m, width = scores.shape
    num_classes = width - 1
    labels.validate(num_classes)
    y_hat = np.zeros((m, num_classes + 1))
    for c in sorted(labels.present):
        top = int(np.argmax(scores[:, c]))
        overlaps = iou_one_vs_many(boxes[top], boxes)
        y_hat[overlaps > iou_threshold, c] = 1.0
    counts = y_hat.sum(axis=1)
    background = counts == 0
    y_hat[background, num_classes] = 1.0
    divisor = np.where(background, 1.0, counts)
    y_hat[:, :num_classes] = y_hat[:, :num_classes] / divisor[:, None]
    return InstanceTargets(y_hat)


def refinement_loss(scores: np.ndarray, targets: InstanceTargets) -> float:
    """Mean-over-proposals cross-entropy between scores and pseudo labels."""
    s = np.clip(scores, EPS, 1.0)
    m = s.shape[0]
    return float(-np.sum(targets.y_hat * np.log(s)) / m)


class HeadGrads(NamedTuple):
    w: np.ndarray
    b: np.ndarray


def refinement_loss_and_grads(
    features: np.ndarray, head: RefinementHead, targets: InstanceTargets
) -> tuple[float, HeadGrads, np.ndarray]:
    """Loss plus analytic gradient: softmax cross-entropy gives (s - y)/m."""
    scores = head_scores(features, head)
    m = scores.shape[0]
    g_logits = (scores - targets.y_hat) / m
    grads = HeadGrads(w=features.T @ g_logits, b=g_logits.sum(axis=0))
    return refinement_loss(scores, targets), grads, scores


def total_loss(image_loss: float, refine_losses: Sequence[float]) -> float:
    """Image-level loss plus the sum of all refinement losses."""
    values = [image_loss, *refine_losses]
    if not all(np.isfinite(v) for v in values):
        raise NonFiniteScore(f"non-finite loss terms: {values}")
    return float(image_loss + sum(refine_losses))


def detection_scores(
    proposals: ProposalSet,
    bundle: ScoreBundle,
    stack: RefinementStack | None,
    last_head_only: bool = False,
) -> np.ndarray:
    """Final per-proposal, per-class scores used for evaluation.

    Mean of the refinement heads' foreground columns (background dropped), or
    the last head's alone when requested.  Without any refinement heads, falls
    back to the unrefined scores p_cls * p_det.
    """
    num_classes = bundle.p_cls.shape[1]
    if stack is None:
        return initial_scores(bundle)[:, :num_classes]
    per_head = [head_scores(proposals.features, head)[:, :num_classes] for head in stack.heads]
    if last_head_only:
        return per_head[-1]
    return np.mean(per_head, axis=0)
