"""Detector training, detection, and evaluation orchestration.

Training optimizes the image-level loss plus every refinement head's loss with
per-parameter adaptive gradient accumulation (accumulate squared gradients,
divide the step by their square root).  All per-step randomness (batch
composition, scale, flip) comes from a fresh generator seeded by (seed, step),
so a run is resumable from (parameters, accumulators, step) alone and two runs
with the same config and seed are bitwise identical.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .captions import LabelSet
from .config import TrainConfig
from .data import DatasetManifest, load_image, read_proposal_file
from .errors import NonFiniteScore
from .evaluation import Detection, GroundTruthBox, detection_map, write_detection_dump
from .features import ToyFeatureProvider
from .geometry import average_multiscale, nms_indices
from .mil import MILHeadParams, ProposalSet, image_label_loss_and_grads, init_mil_params, initial_scores
from .refinement import (
    RefinementHead,
    RefinementStack,
    detection_scores,
    init_refinement_stack,
    instance_targets,
    refinement_loss_and_grads,
    total_loss,
)

log = logging.getLogger(__name__)

ADAGRAD_INIT = 0.1  # initial squared-gradient accumulator


@dataclass
class DetectorState:
    mil: MILHeadParams
    stack: RefinementStack | None
    provider: ToyFeatureProvider
    class_names: list[str]
    config: TrainConfig
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [
            ("mil.w_cls", self.mil.w_cls),
            ("mil.b_cls", self.mil.b_cls),
            ("mil.w_det", self.mil.w_det),
            ("mil.b_det", self.mil.b_det),
        ]
        if self.stack is not None:
            for k, head in enumerate(self.stack.heads):
                items.append((f"head{k}.w", head.w))
                items.append((f"head{k}.b", head.b))
        return items

    def set_param(self, key: str, value: np.ndarray) -> None:
        if key.startswith("mil."):
            setattr(self.mil, key.split(".", 1)[1], value)
        else:
            idx = int(key.split(".")[0][len("head"):])
            setattr(self.stack.heads[idx], key.split(".", 1)[1], value)


def init_detector_state(feature_dim: int, class_names: list[str], config: TrainConfig) -> DetectorState:
    stack = None
    if config.refinements > 0:
        stack = init_refinement_stack(
            feature_dim, len(class_names), config.refinements, config.seed, config.refine_iou
        )
    state = DetectorState(
        mil=init_mil_params(feature_dim, len(class_names), config.seed),
        stack=stack,
        provider=ToyFeatureProvider(config.filters, config.kernel, config.seed),
        class_names=list(class_names),
        config=config,
    )
    state.accumulators = {k: np.full_like(v, ADAGRAD_INIT) for k, v in state.param_items()}
    return state


class _FeatureCache:
    """Loads boxes once per image and features once per (image, scale, flip)."""

    def __init__(self, manifest: DatasetManifest, provider: ToyFeatureProvider, max_proposals: int):
        self.manifest = manifest
        self.provider = provider
        self.max_proposals = max_proposals
        self._raw: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
        self._features: dict[tuple[str, int | None, bool], np.ndarray] = {}
        self._images: dict[str, np.ndarray] = {}

    def boxes_and_stored(self, image_id: str) -> tuple[np.ndarray, np.ndarray | None]:
        if image_id not in self._raw:
            record = self.manifest.get(image_id)
            if record.proposals is None:
                raise ValueError(f"record {image_id!r} has no proposal file")
            boxes, features = read_proposal_file(self.manifest.resolve(record.proposals))
            boxes = boxes[: self.max_proposals]
            if features is not None:
                features = features[: self.max_proposals]
            self._raw[image_id] = (boxes, features)
        return self._raw[image_id]

    def has_stored_features(self, image_id: str) -> bool:
        return self.boxes_and_stored(image_id)[1] is not None

    def proposal_set(self, image_id: str, scale: int | None, flip: bool) -> ProposalSet:
        boxes, stored = self.boxes_and_stored(image_id)
        if stored is not None:
            return ProposalSet(boxes, stored, image_id)
        key = (image_id, scale, flip)
        if key not in self._features:
            record = self.manifest.get(image_id)
            if record.image is None:
                raise ValueError(f"record {image_id!r} has neither stored features nor an image")
            if image_id not in self._images:
                self._images[image_id] = load_image(self.manifest.resolve(record.image))
            self._features[key] = self.provider.extract(self._images[image_id], boxes, scale, flip)
        return ProposalSet(boxes, self._features[key], image_id)


def compute_losses_and_grads(
    proposals: ProposalSet, labels: LabelSet, mil: MILHeadParams, stack: RefinementStack | None
) -> tuple[float, dict[str, np.ndarray]]:
    """Total loss for one image plus gradients keyed like DetectorState params.

    Refinement targets are built from the previous stage's scores and treated
    as constants; no gradient flows through their construction.
    """
    image_loss, mil_grads, bundle = image_label_loss_and_grads(proposals, mil, labels)
    grads = {
        "mil.w_cls": mil_grads.w_cls,
        "mil.b_cls": mil_grads.b_cls,
        "mil.w_det": mil_grads.w_det,
        "mil.b_det": mil_grads.b_det,
    }
    refine_losses: list[float] = []
    if stack is not None:
        prev_scores = initial_scores(bundle)
        for k, head in enumerate(stack.heads):
            targets = instance_targets(proposals.boxes, prev_scores, labels, stack.iou_threshold)
            loss_k, head_grads, scores = refinement_loss_and_grads(proposals.features, head, targets)
            grads[f"head{k}.w"] = head_grads.w
            grads[f"head{k}.b"] = head_grads.b
            refine_losses.append(loss_k)
            prev_scores = scores
    return total_loss(image_loss, refine_losses), grads


@dataclass
class TrainResult:
    state: DetectorState
    losses: list[float]
    skipped_empty: int
    best_val_map: float | None = None
    best_checkpoint: str | None = None


def train_detector(
    manifest: DatasetManifest,
    labels: dict[str, LabelSet],
    class_names: list[str],
    config: TrainConfig,
    workdir: str | None = None,
    resume: str | None = None,
    val_manifest: DatasetManifest | None = None,
) -> TrainResult:
    """Train from image-level labels; images with empty label sets never train."""
    eligible = [r.image_id for r in manifest
                if r.image_id in labels and labels[r.image_id].present and r.proposals is not None]
    skipped = len(manifest) - len(eligible)
    if not eligible:
        raise ValueError("no image has a nonempty label set and proposals; nothing to train on")

    if resume is not None:
        state = load_detector_checkpoint(resume)
        # the run's recipe comes from the checkpoint; only the step target moves
        resumed = state.config.to_dict()
        resumed["steps"] = config.steps
        config = TrainConfig(**{k: (tuple(v) if k == "scales" else v) for k, v in resumed.items()})
        state.config = config
    else:
        probe_provider = ToyFeatureProvider(config.filters, config.kernel, config.seed)
        probe_cache = _FeatureCache(manifest, probe_provider, config.max_proposals)
        boxes, stored = probe_cache.boxes_and_stored(eligible[0])
        dim = stored.shape[1] if stored is not None else probe_provider.feature_dim
        state = init_detector_state(dim, class_names, config)

    cache = _FeatureCache(manifest, state.provider, config.max_proposals)
    if workdir:
        os.makedirs(workdir, exist_ok=True)

    losses: list[float] = []
    best_val: float | None = None
    best_path: str | None = None
    n = len(eligible)
    start = state.step
    for step in range(start, config.steps):
        rng = np.random.default_rng([config.seed, 552, step])
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch_grads: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for i in idx:
            image_id = eligible[int(i)]
            use_aug = not cache.has_stored_features(image_id)
            scale = int(rng.choice(config.scales)) if use_aug else None
            flip = bool(rng.random() < 0.5) if use_aug else False
            proposals = cache.proposal_set(image_id, scale, flip)
            loss, grads = compute_losses_and_grads(proposals, labels[image_id], state.mil, state.stack)
            batch_loss += loss
            for key, g in grads.items():
                batch_grads[key] = batch_grads.get(key, 0.0) + g
        count = len(idx)
        batch_loss /= count
        if not np.isfinite(batch_loss):
            raise NonFiniteScore(
                f"non-finite loss {batch_loss} at step {step} "
                f"(images {[eligible[int(i)] for i in idx]})"
            )
        losses.append(batch_loss)
        for key, current in state.param_items():
            g = batch_grads[key] / count
            acc = state.accumulators[key]
            acc += g * g
            state.set_param(key, current - config.lr * g / np.sqrt(acc))
        state.step = step + 1

        if workdir and (state.step % config.eval_interval == 0 or state.step == config.steps):
            path = os.path.join(workdir, f"ckpt_{state.step:06d}.npz")
            save_detector_checkpoint(path, state)
            if val_manifest is not None:
                val_map = _validation_map(val_manifest, state)
                if val_map is not None and (best_val is None or val_map > best_val):
                    best_val = val_map
                    best_path = os.path.join(workdir, "best.npz")
                    save_detector_checkpoint(best_path, state)
                log.info("step %d: val mAP %s", state.step, f"{val_map:.4f}" if val_map is not None else "n/a")

    return TrainResult(state, losses, skipped, best_val, best_path)


def _validation_map(val_manifest: DatasetManifest, state: DetectorState) -> float | None:
    dets = detect(val_manifest, state)
    gts = ground_truth_boxes(val_manifest, state.class_names)
    if not gts:
        return None
    _, mean = detection_map(dets, gts, len(state.class_names))
    return mean


def detect(manifest: DatasetManifest, state: DetectorState,
           scales: tuple[int, ...] | None = None) -> list[Detection]:
    """Multi-scale scoring, per-class NMS, confidence floor; deterministic."""
    config = state.config
    scales = config.scales if scales is None else scales
    cache = _FeatureCache(manifest, state.provider, config.max_proposals)
    from .mil import mil_forward  # local import keeps module load cheap

    out: list[Detection] = []
    for record in manifest:
        if record.proposals is None:
            continue
        per_scale = []
        if cache.has_stored_features(record.image_id):
            proposals = cache.proposal_set(record.image_id, None, False)
            bundle = mil_forward(proposals, state.mil)
            per_scale.append(detection_scores(proposals, bundle, state.stack, config.last_head_only))
            boxes = proposals.boxes
        else:
            boxes = None
            for scale in scales:
                proposals = cache.proposal_set(record.image_id, int(scale), False)
                bundle = mil_forward(proposals, state.mil)
                per_scale.append(detection_scores(proposals, bundle, state.stack, config.last_head_only))
                boxes = proposals.boxes
        scores = average_multiscale(per_scale)
        for c in range(len(state.class_names)):
            kept = nms_indices(boxes, scores[:, c], config.nms_iou)
            for i in kept:
                if scores[i, c] >= config.score_floor:
                    out.append(Detection(record.image_id, tuple(boxes[i]), c, float(scores[i, c])))
    return out


def ground_truth_boxes(manifest: DatasetManifest, class_names: list[str]) -> list[GroundTruthBox]:
    index = {name: i for i, name in enumerate(class_names)}
    gts = []
    for record in manifest:
        for name, x1, y1, x2, y2 in record.gold_boxes or ():
            if name not in index:
                raise ValueError(f"record {record.image_id!r} has unknown class {name!r} in gold_boxes")
            gts.append(GroundTruthBox(record.image_id, (x1, y1, x2, y2), index[name]))
    return gts


def run_detection_to_dump(manifest: DatasetManifest, state: DetectorState, dump_path: str,
                          scales: tuple[int, ...] | None = None) -> list[Detection]:
    dets = detect(manifest, state, scales)
    write_detection_dump(dump_path, dets, state.class_names)
    return dets


# ---------------------------------------------------------------------------
# checkpoints


def save_detector_checkpoint(path, state: DetectorState) -> None:
    meta = {
        "kind": "detector",
        "version": 1,
        "class_names": state.class_names,
        "config": state.config.to_dict(),
        "step": state.step,
        "refinements": 0 if state.stack is None else state.stack.depth,
        "iou_threshold": None if state.stack is None else state.stack.iou_threshold,
    }
    arrays = {f"param::{k}": v for k, v in state.param_items()}
    arrays.update({f"acc::{k}": v for k, v in state.accumulators.items()})
    arrays["provider::weights"] = state.provider.weights
    arrays["provider::bias"] = state.provider.bias
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_detector_checkpoint(path) -> DetectorState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("kind") != "detector":
            raise ValueError(f"{path} is not a detector checkpoint")
        config = TrainConfig(**{k: (tuple(v) if k == "scales" else v) for k, v in meta["config"].items()})
        params = {k[len("param::"):]: data[k] for k in data.files if k.startswith("param::")}
        mil = MILHeadParams(params["mil.w_cls"], params["mil.b_cls"], params["mil.w_det"], params["mil.b_det"])
        stack = None
        depth = meta["refinements"]
        if depth:
            heads = [RefinementHead(params[f"head{k}.w"], params[f"head{k}.b"]) for k in range(depth)]
            stack = RefinementStack(heads, meta["iou_threshold"])
        provider = ToyFeatureProvider(
            config.filters, config.kernel, config.seed,
            weights=data["provider::weights"], bias=data["provider::bias"],
        )
        state = DetectorState(mil, stack, provider, list(meta["class_names"]), config, step=meta["step"])
        state.accumulators = {k[len("acc::"):]: data[k].copy() for k in data.files if k.startswith("acc::")}
    return state
