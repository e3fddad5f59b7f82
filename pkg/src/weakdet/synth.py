"""Synthetic desk-scale dataset: colored rectangle "objects" on a noisy canvas.

Each object is painted into a multi-scale grid cell, so the grid proposal
family always contains a box with high overlap to every ground truth.  Every
image gets one templated caption; a class-dependent fraction of captions name
objects only through paraphrase words (no exact class-name token), which is
what makes the text-classifier labeling route earn its keep over exact
matching.  A word-vector file covering the whole caption vocabulary is
emitted alongside, with paraphrase vectors placed near their class vector.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .captions import EmbeddingTable, save_word_vectors
from .data import ManifestRecord, grid_proposals, save_manifest, write_proposal_file

CLASS_NAMES = ("circle", "square", "triangle", "diamond")
CLASS_COLORS = ((200, 40, 40), (40, 180, 60), (50, 70, 200), (50, 50, 50))
PARAPHRASES = {
    "circle": ("ring", "disc", "hoop"),
    "square": ("box", "slab", "tile"),
    "triangle": ("wedge", "arrowhead", "gable"),
    "diamond": ("rhombus", "lozenge", "gem"),
}
# per-class chance that a caption paraphrases every mention (averages ~30%)
PARAPHRASE_RATES = (0.10, 0.20, 0.40, 0.55)

FILLER_WORDS = (
    "a", "the", "and", "on", "in", "of", "photo", "picture", "image", "plain",
    "bright", "surface", "background", "shows", "there", "is", "are", "scene",
    "simple", "small", "tidy", "this", "with", "near", "next", "to",
)

TEMPLATES = (
    "a photo of {items} on a plain background",
    "the picture shows {items} in a simple scene",
    "there is {items} on a bright surface",
    "a tidy image with {items}",
)


@dataclass
class SynthConfig:
    num_images: int = 200
    num_classes: int = 4
    canvas: int = 64
    grid: int = 6
    seed: int = 7
    train_fraction: float = 0.75
    embedding_dim: int = 300
    min_objects: int = 1
    max_objects: int = 3

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be 1..{len(CLASS_NAMES)}")
        if self.grid < 2:
            raise ValueError("grid must be >= 2 so objects have non-trivial cells")


def _cell_box(canvas: int, level: int, row: int, col: int) -> tuple[float, float, float, float]:
    size = canvas / level
    return (col * size, row * size, (col + 1) * size, (row + 1) * size)


def _sample_objects(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, tuple[int, int, int, int]]]:
    """(class index, integer box) pairs with limited mutual overlap.

    Objects live on cells of the two finest grid levels.  That keeps every
    object at least as small as any proposal, so no proposal sits strictly
    inside an object; the object-tight box is then the one with the strongest
    color evidence, which is what lets a linear head localize.
    """
    from .geometry import iou

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[tuple[int, tuple[int, int, int, int]]] = []
    levels = (cfg.grid - 1, cfg.grid)
    attempts = 0
    while len(objects) < count and attempts < 50:
        attempts += 1
        cls = int(rng.integers(cfg.num_classes))
        level = int(levels[rng.integers(len(levels))])
        row = int(rng.integers(level))
        col = int(rng.integers(level))
        x1, y1, x2, y2 = _cell_box(cfg.canvas, level, row, col)
        box = (round(x1), round(y1), round(x2), round(y2))
        if any(iou(box, existing) > 0.1 for _, existing in objects):
            continue
        objects.append((cls, box))
    return objects


def _render(rng: np.random.Generator, cfg: SynthConfig, objects) -> np.ndarray:
    canvas = np.full((cfg.canvas, cfg.canvas, 3), 235.0)
    canvas += rng.normal(0.0, 6.0, size=canvas.shape)
    for cls, (x1, y1, x2, y2) in objects:
        color = np.array(CLASS_COLORS[cls], dtype=np.float64)
        canvas[y1:y2, x1:x2] = color + rng.normal(0.0, 8.0, size=(y2 - y1, x2 - x1, 3))
    return np.clip(canvas, 0, 255).astype(np.uint8)


def _join_items(names: list[str]) -> str:
    phrases = [f"a {n}" for n in names]
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def _caption(rng: np.random.Generator, cfg: SynthConfig, class_indices: list[int]) -> str:
    rate = PARAPHRASE_RATES[class_indices[int(rng.integers(len(class_indices)))]]
    paraphrase = bool(rng.random() < rate)
    names = []
    for c in class_indices:
        base = CLASS_NAMES[c]
        if paraphrase:
            options = PARAPHRASES[base]
            names.append(options[int(rng.integers(len(options)))])
        else:
            names.append(base)
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    return template.format(items=_join_items(names))


def build_embeddings(cfg: SynthConfig) -> EmbeddingTable:
    """Unit vectors: paraphrases sit close to their class, fillers far away."""
    rng = np.random.default_rng([cfg.seed, 909])
    vectors: dict[str, np.ndarray] = {}

    def unit(v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    for c in range(cfg.num_classes):
        name = CLASS_NAMES[c]
        base = unit(rng.normal(size=cfg.embedding_dim))
        vectors[name] = base
        for syn in PARAPHRASES[name]:
            vectors[syn] = unit(base + 0.15 * rng.normal(size=cfg.embedding_dim))
    for word in FILLER_WORDS:
        vectors[word] = unit(rng.normal(size=cfg.embedding_dim))
    return EmbeddingTable(cfg.embedding_dim, vectors)


def make_synthetic(out_dir: str, cfg: SynthConfig | None = None) -> dict:
    """Emit images, grid proposals, manifests, vocabulary, and embeddings.

    Returns a summary dict with the paths of everything written.
    """
    cfg = cfg or SynthConfig()
    os.makedirs(out_dir, exist_ok=True)
    image_dir = os.path.join(out_dir, "images")
    proposal_dir = os.path.join(out_dir, "proposals")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(proposal_dir, exist_ok=True)

    class_names = list(CLASS_NAMES[: cfg.num_classes])
    boxes = grid_proposals((cfg.canvas, cfg.canvas), cfg.grid)
    shared_proposals = os.path.join(proposal_dir, "grid.bin")
    write_proposal_file(shared_proposals, boxes)

    records: list[ManifestRecord] = []
    paraphrased = 0
    for i in range(cfg.num_images):
        rng = np.random.default_rng([cfg.seed, 101, i])
        image_id = f"img_{i:04d}"
        objects = _sample_objects(rng, cfg)
        image = _render(rng, cfg, objects)
        np.save(os.path.join(image_dir, image_id + ".npy"), image)

        present = sorted({cls for cls, _ in objects})
        caption = _caption(rng, cfg, present)
        if not any(CLASS_NAMES[c] in caption.split() for c in present):
            paraphrased += 1
        records.append(
            ManifestRecord(
                image_id=image_id,
                image=os.path.join("images", image_id + ".npy"),
                captions=(caption,),
                gold_labels=tuple(class_names[c] for c in present),
                gold_boxes=tuple(
                    (class_names[cls], float(x1), float(y1), float(x2), float(y2))
                    for cls, (x1, y1, x2, y2) in objects
                ),
                proposals=os.path.join("proposals", "grid.bin"),
            )
        )

    split = int(round(cfg.num_images * cfg.train_fraction))
    order = np.random.default_rng([cfg.seed, 77]).permutation(cfg.num_images)
    train_records = [records[i] for i in order[:split]]
    test_records = [records[i] for i in order[split:]]
    train_path = os.path.join(out_dir, "train.jsonl")
    test_path = os.path.join(out_dir, "test.jsonl")
    save_manifest(train_path, train_records)
    save_manifest(test_path, test_records)

    classes_path = os.path.join(out_dir, "classes.txt")
    with open(classes_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(class_names) + "\n")

    synonyms_path = os.path.join(out_dir, "synonyms.tsv")
    with open(synonyms_path, "w", encoding="utf-8") as fh:
        for name in class_names:
            for syn in PARAPHRASES[name]:
                fh.write(f"{syn}\t{name}\n")

    embeddings_path = os.path.join(out_dir, "embeddings.txt")
    save_word_vectors(embeddings_path, build_embeddings(cfg))

    config_path = os.path.join(out_dir, "synthetic.cfg")
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(
            "# desk-scale defaults for the synthetic set\n"
            "lr = 0.5\n"
            "filters = 12\n"
            "scales = 48,64,80\n"
            "steps = 2000\n"
            "eval_interval = 500\n"
            f"max_proposals = {min(500, len(boxes))}\n"
            f"seed = {cfg.seed}\n"
        )

    return {
        "train_manifest": train_path,
        "test_manifest": test_path,
        "classes": classes_path,
        "synonyms": synonyms_path,
        "embeddings": embeddings_path,
        "config": config_path,
        "num_train": len(train_records),
        "num_test": len(test_records),
        "num_proposals": int(len(boxes)),
        "paraphrased_captions": paraphrased,
    }
