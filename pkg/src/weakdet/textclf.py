"""Caption text classifier: embed words, project, max-pool, predict labels.

The model is deliberately small: a rectified affine projection of each word
vector, an elementwise max over the words of the caption, and an affine output
layer read through per-class sigmoids.  Gradients are written out by hand and
are verified against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .captions import EmbeddingTable, LabelSet, TokenizedCaption
from .errors import EmptyInput

log = logging.getLogger(__name__)


@dataclass
class TextClassifierParams:
    """Projection (in->hidden) and output (hidden->C) affine maps plus threshold."""

    w_proj: np.ndarray  # (in_dim, hidden)
    b_proj: np.ndarray  # (hidden,)
    w_out: np.ndarray  # (hidden, C)
    b_out: np.ndarray  # (C,)
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        for name in ("w_proj", "b_proj", "w_out", "b_out"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            setattr(self, name, arr)

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[1]

    def copy(self) -> "TextClassifierParams":
        return TextClassifierParams(
            self.w_proj.copy(), self.b_proj.copy(), self.w_out.copy(), self.b_out.copy(), self.threshold
        )


@dataclass(frozen=True)
class LabeledCaptionExample:
    tokens: TokenizedCaption
    gold: LabelSet


class LabelPR(NamedTuple):
    """Micro-averaged precision/recall plus per-class pairs (None = undefined)."""

    precision: float | None
    recall: float | None
    per_class: list[tuple[float | None, float | None]]


@dataclass
class TextTrainConfig:
    lr: float = 0.01
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.5
    hidden: int = 400
    train_embeddings: bool = False
    concat_captions: bool = False  # one example per image instead of per caption

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0 or self.batch_size <= 0 or self.hidden <= 0:
            raise ValueError("lr, steps, batch_size, hidden must be positive")


def init_text_params(in_dim: int, hidden: int, num_classes: int, seed: int, threshold: float = 0.5):
    rng = np.random.default_rng([seed, 401])
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = 1.0 / np.sqrt(hidden)
    return TextClassifierParams(
        w_proj=rng.uniform(-s1, s1, size=(in_dim, hidden)),
        b_proj=np.zeros(hidden),
        w_out=rng.uniform(-s2, s2, size=(hidden, num_classes)),
        b_out=np.zeros(num_classes),
        threshold=threshold,
    )


def _embed_tokens(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    vecs = [table.get(t) for t in tokens]
    vecs = [v for v in vecs if v is not None]
    if not vecs:
        raise EmptyInput("no caption token has an embedding")
    return np.stack(vecs)


def forward_logits(caption: TokenizedCaption, table: EmbeddingTable, params: TextClassifierParams) -> np.ndarray:
    """Per-class logits: output(max over tokens of relu(projection(embedding)))."""
    emb = _embed_tokens(caption.tokens, table)  # (T, in_dim); raises EmptyInput
    hidden = np.maximum(emb @ params.w_proj + params.b_proj, 0.0)  # (T, hidden)
    pooled = hidden.max(axis=0)  # (hidden,)
    return pooled @ params.w_out + params.b_out


def predict_labels(caption: TokenizedCaption, table: EmbeddingTable, params: TextClassifierParams) -> LabelSet:
    """Threshold the sigmoid scores; fall back to the arg-max class if none pass.

    The fallback guarantees the detector always receives at least one label
    from the classifier route.
    """
    logits = forward_logits(caption, table, params)
    probs = _sigmoid(logits)
    present = {int(c) for c in np.flatnonzero(probs >= params.threshold)}
    if not present:
        present = {int(np.argmax(logits))}
    return LabelSet(frozenset(present), "classifier")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _multi_hot(labels: LabelSet, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    y[sorted(labels.present)] = 1.0
    return y


class TextGrads(NamedTuple):
    w_proj: np.ndarray
    b_proj: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    embeddings: dict[str, np.ndarray]  # empty unless embeddings are trainable


def classifier_loss_and_grads(
    batch: Sequence[LabeledCaptionExample],
    table: EmbeddingTable,
    params: TextClassifierParams,
    want_embedding_grads: bool = False,
) -> tuple[float, TextGrads, int]:
    """Mean per-class sigmoid cross-entropy over the batch, with gradients.

    Examples whose tokens all lack embeddings are skipped; the skip count is
    returned so callers can log it.  Gradient of the max-pool routes to the
    first arg-max token per hidden coordinate.
    """
    C = params.num_classes
    dw_proj = np.zeros_like(params.w_proj)
    db_proj = np.zeros_like(params.b_proj)
    dw_out = np.zeros_like(params.w_out)
    db_out = np.zeros_like(params.b_out)
    demb: dict[str, np.ndarray] = {}
    total = 0.0
    used = 0
    skipped = 0

    for ex in batch:
        kept = [(t, table.get(t)) for t in ex.tokens.tokens]
        kept = [(t, v) for t, v in kept if v is not None]
        if not kept:
            skipped += 1
            continue
        words = [t for t, _ in kept]
        emb = np.stack([v for _, v in kept])  # (T, in)
        pre = emb @ params.w_proj + params.b_proj  # (T, hidden)
        act = np.maximum(pre, 0.0)
        argmax = act.argmax(axis=0)  # (hidden,)
        pooled = act[argmax, np.arange(act.shape[1])]
        logits = pooled @ params.w_out + params.b_out
        probs = _sigmoid(logits)
        y = _multi_hot(ex.gold, C)
        eps = 1e-12
        total += float(-np.mean(y * np.log(probs + eps) + (1 - y) * np.log(1 - probs + eps)))
        used += 1

        dlogits = (probs - y) / C  # mean over classes
        dw_out += np.outer(pooled, dlogits)
        db_out += dlogits
        dpooled = params.w_out @ dlogits  # (hidden,)
        dact = np.zeros_like(act)
        dact[argmax, np.arange(act.shape[1])] = dpooled
        dpre = dact * (pre > 0)
        dw_proj += emb.T @ dpre
        db_proj += dpre.sum(axis=0)
        if want_embedding_grads:
            demb_rows = dpre @ params.w_proj.T  # (T, in)
            for row, word in zip(demb_rows, words):
                if word in demb:
                    demb[word] = demb[word] + row
                else:
                    demb[word] = row.copy()

    if used == 0:
        raise EmptyInput("every example in the batch was skipped (all tokens OOV)")
    inv = 1.0 / used
    grads = TextGrads(dw_proj * inv, db_proj * inv, dw_out * inv, db_out * inv,
                      {w: g * inv for w, g in demb.items()})
    return total * inv, grads, skipped


def train_text_classifier(
    data: Sequence[LabeledCaptionExample],
    table: EmbeddingTable,
    config: TextTrainConfig,
) -> TextClassifierParams:
    """Minimize the multi-label cross-entropy with per-parameter adaptive steps.

    Deterministic for a fixed seed: minibatch composition at step ``t`` is a
    pure function of (seed, t).
    """
    if not data:
        raise ValueError("training data is empty")
    params = init_text_params(table.dim, config.hidden, _num_classes_of(data), config.seed, config.threshold)
    acc = {name: np.full_like(getattr(params, name), 0.1) for name in ("w_proj", "b_proj", "w_out", "b_out")}
    emb_acc: dict[str, np.ndarray] = {}
    table = EmbeddingTable(table.dim, dict(table.vectors)) if config.train_embeddings else table
    n = len(data)
    skipped_total = 0

    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        take = min(config.batch_size, n)
        idx = rng.choice(n, size=take, replace=False)
        batch = [data[i] for i in idx]
        try:
            _, grads, skipped = classifier_loss_and_grads(
                batch, table, params, want_embedding_grads=config.train_embeddings
            )
        except EmptyInput:
            skipped_total += len(batch)
            continue
        skipped_total += skipped
        for name in ("w_proj", "b_proj", "w_out", "b_out"):
            g = getattr(grads, name)
            acc[name] += g * g
            setattr(params, name, getattr(params, name) - config.lr * g / np.sqrt(acc[name]))
        for word, g in grads.embeddings.items():
            a = emb_acc.setdefault(word, np.full_like(g, 0.1))
            a += g * g
            table.vectors[word] = table.vectors[word] - config.lr * g / np.sqrt(a)

    if skipped_total:
        log.info("text classifier training skipped %d fully-OOV examples", skipped_total)
    return params


def _num_classes_of(data: Sequence[LabeledCaptionExample]) -> int:
    top = -1
    for ex in data:
        if ex.gold.present:
            top = max(top, max(ex.gold.present))
    if top < 0:
        raise ValueError("no example carries a gold label; cannot size the output layer")
    return top + 1


def eval_label_pr(pred: Sequence[LabelSet], gold: Sequence[LabelSet]) -> LabelPR:
    """Micro precision/recall over all (example, class) pairs, plus per-class.

    Empty denominators are reported as None rather than coerced to 0.
    """
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gold)} golds")
    num_classes = 0
    for ls in list(pred) + list(gold):
        if ls.present:
            num_classes = max(num_classes, max(ls.present) + 1)
    tp = np.zeros(num_classes)
    n_pred = np.zeros(num_classes)
    n_gold = np.zeros(num_classes)
    for p, g in zip(pred, gold):
        for c in p.present:
            n_pred[c] += 1
            if c in g.present:
                tp[c] += 1
        for c in g.present:
            n_gold[c] += 1

    def ratio(num: float, den: float) -> float | None:
        return None if den == 0 else num / den

    per_class = [(ratio(tp[c], n_pred[c]), ratio(tp[c], n_gold[c])) for c in range(num_classes)]
    return LabelPR(ratio(tp.sum(), n_pred.sum()), ratio(tp.sum(), n_gold.sum()), per_class)


def save_text_checkpoint(path, params: TextClassifierParams, vocab_hash: str, embedding_dim: int) -> None:
    """Self-describing parameter dump (arrays + JSON header)."""
    meta = {
        "kind": "text-classifier",
        "version": 1,
        "vocab_hash": vocab_hash,
        "embedding_dim": int(embedding_dim),
        "num_classes": int(params.num_classes),
        "threshold": float(params.threshold),
    }
    np.savez(
        path,
        meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        w_proj=params.w_proj,
        b_proj=params.b_proj,
        w_out=params.w_out,
        b_out=params.b_out,
    )


def load_text_checkpoint(path) -> tuple[TextClassifierParams, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("kind") != "text-classifier":
            raise ValueError(f"{path} is not a text-classifier checkpoint")
        params = TextClassifierParams(
            w_proj=data["w_proj"],
            b_proj=data["b_proj"],
            w_out=data["w_out"],
            b_out=data["b_out"],
            threshold=meta["threshold"],
        )
    return params, meta
