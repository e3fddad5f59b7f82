"""Dataset plumbing: manifests, proposal/feature files, grid proposals, labels.

Manifest format: UTF-8 JSON-lines, one record per image with keys
  image_id   unique string (required)
  image      path to an .npy image array, relative to the manifest (optional)
  captions   list of caption strings (may be empty only with gold_labels)
  gold_labels  list of class-name strings (optional)
  gold_boxes   list of [class_name, x1, y1, x2, y2] (optional)
  proposals  path to a proposal/feature file, relative to the manifest (optional)

Proposal/feature file: little-endian binary, magic "WDPB", version 1, then
m (u32), d (u32), box_cols (u32 = 4), m*4 float32 box coordinates and m*d
float32 feature values.  d = 0 means boxes only (features are computed on the
fly from the image by a feature provider).
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .captions import (
    CategoryVocabulary,
    EmbeddingTable,
    LabelSet,
    exact_match,
    nearest_embedding_label,
    synonym_match,
    tokenize,
    two_step_labels,
)
from .errors import MissingProposalFile, ParseError

log = logging.getLogger(__name__)

PROPOSAL_MAGIC = b"WDPB"
PROPOSAL_VERSION = 1

STRATEGIES = ("exact", "synonym", "embedding", "two-step", "gold")


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    image: str | None = None
    captions: tuple[str, ...] = ()
    gold_labels: tuple[str, ...] | None = None
    gold_boxes: tuple[tuple[str, float, float, float, float], ...] | None = None
    proposals: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: str = "."

    def __post_init__(self):
        self._by_id = {r.image_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, image_id: str) -> ManifestRecord:
        return self._by_id[image_id]

    def resolve(self, relpath: str) -> str:
        return os.path.join(self.root, relpath)


def _parse_record(obj: dict, lineno: int) -> ManifestRecord:
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: record is not a JSON object")
    image_id = obj.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise ParseError(f"line {lineno}: missing or invalid image_id")
    captions = obj.get("captions", [])
    if not isinstance(captions, list) or not all(isinstance(c, str) for c in captions):
        raise ParseError(f"line {lineno}: captions must be a list of strings")
    gold_labels = obj.get("gold_labels")
    if gold_labels is not None and (
        not isinstance(gold_labels, list) or not all(isinstance(g, str) for g in gold_labels)
    ):
        raise ParseError(f"line {lineno}: gold_labels must be a list of strings")
    if not captions and gold_labels is None:
        raise ParseError(f"line {lineno}: record has neither captions nor gold_labels")
    gold_boxes = obj.get("gold_boxes")
    boxes: tuple | None = None
    if gold_boxes is not None:
        parsed = []
        for entry in gold_boxes:
            if not (isinstance(entry, list) and len(entry) == 5 and isinstance(entry[0], str)):
                raise ParseError(f"line {lineno}: gold_boxes entries must be [class, x1, y1, x2, y2]")
            parsed.append((entry[0], float(entry[1]), float(entry[2]), float(entry[3]), float(entry[4])))
        boxes = tuple(parsed)
    return ManifestRecord(
        image_id=image_id,
        image=obj.get("image"),
        captions=tuple(captions),
        gold_labels=tuple(gold_labels) if gold_labels is not None else None,
        gold_boxes=boxes,
        proposals=obj.get("proposals"),
    )


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; aggregates every offending line."""
    records: list[ManifestRecord] = []
    problems: list[str] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            try:
                record = _parse_record(obj, lineno)
            except ParseError as exc:
                problems.append(str(exc))
                continue
            if record.image_id in seen:
                problems.append(f"line {lineno}: duplicate image_id {record.image_id!r}")
                continue
            seen.add(record.image_id)
            records.append(record)
    if problems:
        raise ParseError(f"{path}: " + "; ".join(problems))

    manifest = DatasetManifest(records, root=os.path.dirname(os.path.abspath(path)))
    missing = [
        r.image_id
        for r in records
        if r.proposals is not None and not os.path.exists(manifest.resolve(r.proposals))
    ]
    if missing:
        raise MissingProposalFile(f"{path}: proposal files missing for images {missing}")
    return manifest


def save_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj: dict = {"image_id": r.image_id}
            if r.image is not None:
                obj["image"] = r.image
            obj["captions"] = list(r.captions)
            if r.gold_labels is not None:
                obj["gold_labels"] = list(r.gold_labels)
            if r.gold_boxes is not None:
                obj["gold_boxes"] = [[name, x1, y1, x2, y2] for name, x1, y1, x2, y2 in r.gold_boxes]
            if r.proposals is not None:
                obj["proposals"] = r.proposals
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# proposal/feature binary files


def write_proposal_file(path, boxes: np.ndarray, features: np.ndarray | None = None) -> None:
    boxes = np.asarray(boxes, dtype=np.float32)
    m = boxes.shape[0]
    if boxes.shape != (m, 4):
        raise ValueError(f"boxes must be (m, 4), got {boxes.shape}")
    if features is None:
        d = 0
    else:
        features = np.asarray(features, dtype=np.float32)
        if features.shape[0] != m:
            raise ValueError("features row count must match boxes")
        d = features.shape[1]
    with open(path, "wb") as fh:
        fh.write(PROPOSAL_MAGIC)
        fh.write(struct.pack("<HIII", PROPOSAL_VERSION, m, d, 4))
        fh.write(boxes.astype("<f4").tobytes())
        if d:
            fh.write(features.astype("<f4").tobytes())


def read_proposal_file(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (boxes, features-or-None) as float64 arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PROPOSAL_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        version, m, d, box_cols = struct.unpack("<HIII", fh.read(14))
        if version != PROPOSAL_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        if box_cols != 4:
            raise ParseError(f"{path}: expected 4 box columns, got {box_cols}")
        boxes = np.frombuffer(fh.read(m * 4 * 4), dtype="<f4").reshape(m, 4).astype(np.float64)
        features = None
        if d:
            features = np.frombuffer(fh.read(m * d * 4), dtype="<f4").reshape(m, d).astype(np.float64)
    return boxes, features


def load_image(path) -> np.ndarray:
    """Load an .npy image as float64 (H, W, 3) scaled to [0, 1]."""
    arr = np.load(path)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# grid proposals


def grid_proposals(image_size: tuple[float, float], grid: int, max_proposals: int = 500) -> np.ndarray:
    """Deterministic multi-scale grid: level k tiles the image k-by-k.

    Levels run 1..grid; level 1 is the full-image box.  The list is truncated
    at ``max_proposals``.
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    width, height = float(image_size[0]), float(image_size[1])
    boxes: list[tuple[float, float, float, float]] = []
    for level in range(1, grid + 1):
        cell_w = width / level
        cell_h = height / level
        for row in range(level):
            for col in range(level):
                boxes.append((col * cell_w, row * cell_h, (col + 1) * cell_w, (row + 1) * cell_h))
                if len(boxes) == max_proposals:
                    return np.array(boxes)
    return np.array(boxes)


# ---------------------------------------------------------------------------
# image-level label building


@dataclass
class LabelStats:
    total_images: int = 0
    empty_images: int = 0
    captions_by_provenance: dict = field(default_factory=dict)

    def note(self, provenance: str):
        self.captions_by_provenance[provenance] = self.captions_by_provenance.get(provenance, 0) + 1


def build_image_labels(
    manifest: DatasetManifest,
    strategy: str,
    vocab: CategoryVocabulary,
    table: EmbeddingTable | None = None,
    classifier_params=None,
) -> tuple[dict[str, LabelSet], LabelStats]:
    """Per-image label sets: union of the per-caption rule over all captions.

    Images ending up with an empty set are flagged in the stats and must be
    excluded from detector training by the caller.  The union's provenance is
    "exact" only when every nonempty contributing caption set was exact.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; pick one of {STRATEGIES}")
    if strategy == "embedding" and table is None:
        raise ValueError("embedding strategy needs an embedding table")
    if strategy == "two-step" and (table is None or classifier_params is None):
        raise ValueError("two-step strategy needs an embedding table and classifier params")

    fallback = {"exact": "exact", "synonym": "synonym", "embedding": "embedding",
                "two-step": "classifier", "gold": "gold"}[strategy]
    labels: dict[str, LabelSet] = {}
    stats = LabelStats(total_images=len(manifest))
    for record in manifest:
        if strategy == "gold":
            if record.gold_labels is None:
                raise ParseError(f"record {record.image_id!r} has no gold_labels")
            present = frozenset(vocab.index_of(name) for name in record.gold_labels)
            result = LabelSet(present, "gold")
            stats.note("gold")
        else:
            union: set[int] = set()
            all_exact = True
            for caption in record.captions:
                tokens = tokenize(caption)
                if strategy == "exact":
                    ls = exact_match(tokens, vocab)
                elif strategy == "synonym":
                    ls = synonym_match(tokens, vocab)
                elif strategy == "embedding":
                    ls = nearest_embedding_label(tokens, table, vocab)
                else:
                    ls = two_step_labels(tokens, vocab, classifier_params, table)
                stats.note(ls.provenance)
                union |= ls.present
                if ls.present and ls.provenance != "exact":
                    all_exact = False
            provenance = "exact" if (all_exact and strategy in ("exact", "two-step")) else fallback
            result = LabelSet(frozenset(union), provenance if union else fallback)
        if not result.present:
            stats.empty_images += 1
        labels[record.image_id] = result
    if stats.empty_images:
        log.info(
            "%d/%d images have an empty %s label set and will be skipped in training",
            stats.empty_images, stats.total_images, strategy,
        )
    return labels, stats


def write_labels(path, labels: dict[str, LabelSet], class_names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, ls in labels.items():
            fh.write(json.dumps({
                "image_id": image_id,
                "labels": [class_names[i] for i in sorted(ls.present)],
                "provenance": ls.provenance,
            }) + "\n")


def read_labels(path, vocab: CategoryVocabulary) -> dict[str, LabelSet]:
    labels: dict[str, LabelSet] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                labels[obj["image_id"]] = LabelSet(
                    frozenset(vocab.index_of(n) for n in obj["labels"]), obj["provenance"]
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return labels
