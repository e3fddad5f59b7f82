"""Two-stream multiple-instance detection head.

Each proposal feature gets a per-class classification logit and a per-class
selection logit from two parallel affine maps.  Selection logits are turned
into a softmax *across proposals* per class, and the image-level class
probability is the sigmoid of the selection-weighted sum of classification
logits (logits are aggregated before the sigmoid, which keeps training
stable).  The image-level loss is a per-class binary cross-entropy against
the image labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .captions import LabelSet
from .errors import NonFiniteScore

MAX_PROPOSALS = 500
EPS = 1e-8  # probability clamp used inside all logs


@dataclass
class ProposalSet:
    """Candidate boxes for one image plus their feature rows."""

    boxes: np.ndarray  # (m, 4) as x1, y1, x2, y2
    features: np.ndarray  # (m, d)
    image_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        m = self.boxes.shape[0]
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise ValueError(f"boxes must be (m, 4), got {self.boxes.shape}")
        if not 1 <= m <= MAX_PROPOSALS:
            raise ValueError(f"need 1..{MAX_PROPOSALS} proposals, got {m}")
        if self.features.ndim != 2 or self.features.shape[0] != m:
            raise ValueError(f"features must be (m, d) with m={m}, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(self.boxes[:, 1] >= self.boxes[:, 3]):
            raise ValueError("boxes must satisfy x1 < x2 and y1 < y2")

    @property
    def size(self) -> int:
        return self.boxes.shape[0]


@dataclass
class MILHeadParams:
    w_cls: np.ndarray  # (d, C)
    b_cls: np.ndarray  # (C,)
    w_det: np.ndarray  # (d, C)
    b_det: np.ndarray  # (C,)

    def __post_init__(self):
        for name in ("w_cls", "b_cls", "w_det", "b_det"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1]

    def copy(self) -> "MILHeadParams":
        return MILHeadParams(self.w_cls.copy(), self.b_cls.copy(), self.w_det.copy(), self.b_det.copy())


@dataclass
class ScoreBundle:
    """All per-proposal and image-level scores for one image."""

    o_cls: np.ndarray  # (m, C) classification logits
    o_det: np.ndarray  # (m, C) selection logits
    p_cls: np.ndarray  # (m, C) sigmoid(o_cls)
    p_det: np.ndarray  # (m, C) softmax of o_det across proposals, per class
    p_hat: np.ndarray  # (C,) image-level class probabilities


def init_mil_params(feature_dim: int, num_classes: int, seed: int) -> MILHeadParams:
    """Zero biases, symmetric uniform weights at scale 1/sqrt(d)."""
    rng = np.random.default_rng([seed, 811])
    s = 1.0 / np.sqrt(feature_dim)
    return MILHeadParams(
        w_cls=rng.uniform(-s, s, size=(feature_dim, num_classes)),
        b_cls=np.zeros(num_classes),
        w_det=rng.uniform(-s, s, size=(feature_dim, num_classes)),
        b_det=np.zeros(num_classes),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_over_proposals(o_det: np.ndarray) -> np.ndarray:
    """Column-wise softmax, stabilized by subtracting each column's max."""
    shifted = o_det - o_det.max(axis=0, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=0, keepdims=True)


def mil_forward(proposals: ProposalSet, params: MILHeadParams) -> ScoreBundle:
    """Score every proposal and aggregate to image-level class probabilities."""
    o_cls = proposals.features @ params.w_cls + params.b_cls
    o_det = proposals.features @ params.w_det + params.b_det
    p_cls = _sigmoid(o_cls)
    p_det = softmax_over_proposals(o_det)
    p_hat = _sigmoid(np.sum(p_det * o_cls, axis=0))
    for name, arr in (("o_cls", o_cls), ("o_det", o_det), ("p_det", p_det), ("p_hat", p_hat)):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteScore(f"{name} is non-finite for image {proposals.image_id!r}")
    return ScoreBundle(o_cls=o_cls, o_det=o_det, p_cls=p_cls, p_det=p_det, p_hat=p_hat)


def _multi_hot(labels: LabelSet, num_classes: int) -> np.ndarray:
    labels.validate(num_classes)
    y = np.zeros(num_classes)
    if labels.present:
        y[sorted(labels.present)] = 1.0
    return y


def image_label_loss(bundle: ScoreBundle, labels: LabelSet) -> float:
    """Binary cross-entropy of the aggregated image prediction, summed over classes."""
    y = _multi_hot(labels, bundle.p_hat.shape[0])
    p = np.clip(bundle.p_hat, EPS, 1.0 - EPS)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


class MILGrads(NamedTuple):
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_det: np.ndarray
    b_det: np.ndarray


def image_label_loss_and_grads(
    proposals: ProposalSet, params: MILHeadParams, labels: LabelSet
) -> tuple[float, MILGrads, ScoreBundle]:
    """Loss plus analytic gradients for both affine streams.

    With u_c the selection-weighted sum of classification logits:
      d loss / d o_cls[i,c] = (p_hat_c - y_c) * p_det[i,c]
      d loss / d o_det[i,c] = (p_hat_c - y_c) * p_det[i,c] * (o_cls[i,c] - u_c)
    (the second uses the softmax Jacobian across proposals).
    """
    bundle = mil_forward(proposals, params)
    y = _multi_hot(labels, params.num_classes)
    u = np.sum(bundle.p_det * bundle.o_cls, axis=0)  # (C,)
    g_u = bundle.p_hat - y  # (C,)
    g_ocls = g_u * bundle.p_det
    g_odet = g_u * bundle.p_det * (bundle.o_cls - u)
    x = proposals.features
    grads = MILGrads(
        w_cls=x.T @ g_ocls,
        b_cls=g_ocls.sum(axis=0),
        w_det=x.T @ g_odet,
        b_det=g_odet.sum(axis=0),
    )
    return image_label_loss(bundle, labels), grads, bundle


def initial_scores(bundle: ScoreBundle) -> np.ndarray:
    """Detection scores before any refinement: p_cls * p_det per class.

    Returns (m, C+1); the trailing background column is all zeros.
    """
    m, num_classes = bundle.p_cls.shape
    out = np.zeros((m, num_classes + 1))
    out[:, :num_classes] = bundle.p_cls * bundle.p_det
    return out
