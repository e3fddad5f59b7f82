"""Caption-to-label inference.

Turns free-form caption text into sets of category labels via four routes:
exact lexical match of category names, a hand-curated synonym vocabulary,
nearest word-vector match, or a trained text classifier (the fallback of the
two-step rule in :func:`two_step_labels`).
"""

from __future__ import annotations

import hashlib
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, MissingClassEmbedding, ParseError

PROVENANCES = ("exact", "synonym", "embedding", "classifier", "gold")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class TokenizedCaption:
    """Lowercased, punctuation-free tokens plus the original text."""

    tokens: tuple[str, ...]
    source: str


@dataclass(frozen=True)
class LabelSet:
    """A set of category indices plus how they were obtained."""

    present: frozenset[int]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def validate(self, num_classes: int) -> None:
        bad = [i for i in self.present if not 0 <= i < num_classes]
        if bad:
            raise ValueError(f"label indices {bad} outside [0, {num_classes})")


class CategoryVocabulary:
    """Ordered category names plus a word/phrase -> class-index synonym map.

    Every category name is registered as a synonym of itself, so the synonym
    route always subsumes the exact route.  Synonym keys may be multi-word
    phrases; matching scans contiguous token n-grams.
    """

    def __init__(self, classes: list[str], synonyms: dict[str, int] | None = None):
        classes = [c.strip().lower() for c in classes]
        if not classes:
            raise ValueError("vocabulary needs at least one class")
        if len(set(classes)) != len(classes):
            raise ValueError("class names must be unique")
        self.classes = classes
        self.synonyms: dict[str, int] = {}
        for idx, name in enumerate(classes):
            self.synonyms[name] = idx
        for word, idx in (synonyms or {}).items():
            if not 0 <= idx < len(classes):
                raise ValueError(f"synonym {word!r} targets class {idx} outside [0, {len(classes)})")
            self.synonyms[word.strip().lower()] = idx
        # n-gram lengths worth scanning, per route
        self._name_ngrams = sorted({len(c.split()) for c in classes})
        self._syn_ngrams = sorted({len(k.split()) for k in self.synonyms})

    def __len__(self) -> int:
        return len(self.classes)

    def index_of(self, name: str) -> int:
        try:
            return self.classes.index(name.strip().lower())
        except ValueError:
            raise KeyError(f"unknown class name {name!r}") from None

    def content_hash(self) -> str:
        """Stable digest of the class list, for checkpoint self-description."""
        return hashlib.sha256("\n".join(self.classes).encode()).hexdigest()[:16]

    @classmethod
    def from_files(cls, classes_path, synonyms_path=None) -> "CategoryVocabulary":
        """Load classes (one name per line) and an optional TSV synonym list.

        Synonym file format: one ``word<TAB>class_name`` entry per line.
        """
        with open(classes_path, encoding="utf-8") as fh:
            classes = [line.strip().lower() for line in fh if line.strip()]
        vocab = cls(classes)
        if synonyms_path is not None:
            syn: dict[str, int] = {}
            with open(synonyms_path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.rstrip("\n")
                    if not line.strip():
                        continue
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise ParseError(f"{synonyms_path}:{lineno}: expected 'word<TAB>class_name'")
                    word, name = parts
                    try:
                        syn[word.strip().lower()] = vocab.index_of(name)
                    except KeyError as exc:
                        raise ParseError(f"{synonyms_path}:{lineno}: {exc}") from None
            vocab = cls(classes, syn)
        return vocab


class EmbeddingTable:
    """Word -> fixed-length vector map with explicit missing-word handling."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray]):
        self.dim = dim
        self.vectors = {}
        for word, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise ValueError(f"vector for {word!r} has shape {arr.shape}, want ({dim},)")
            self.vectors[word] = arr

    def __contains__(self, word: str) -> bool:
        return word in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, word: str) -> np.ndarray | None:
        """Vector for ``word`` or None; never a silent zero vector."""
        return self.vectors.get(word)

    def class_vector(self, name: str) -> np.ndarray:
        """Embedding for a category name; multi-word names average their tokens."""
        direct = self.vectors.get(name)
        if direct is not None:
            return direct
        parts = name.split()
        vecs = [self.vectors.get(p) for p in parts]
        if any(v is None for v in vecs):
            raise MissingClassEmbedding(name)
        return np.mean(vecs, axis=0)


def load_word_vectors(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Load a textual word-vector file: ``word v1 v2 ... vD`` per line."""
    vectors: dict[str, np.ndarray] = {}
    dim = expected_dim
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                if not line.strip():
                    continue
                raise ParseError(f"{path}:{lineno}: not a word-vector line")
            word = parts[0]
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric vector component") from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ParseError(f"{path}:{lineno}: got {vec.size} components, want {dim}")
            vectors[word] = vec
    if dim is None:
        raise ParseError(f"{path}: empty embedding file")
    return EmbeddingTable(dim, vectors)


def save_word_vectors(path, table: EmbeddingTable, decimals: int = 6) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in table.vectors.items():
            fh.write(word + " " + " ".join(f"{x:.{decimals}f}" for x in vec) + "\n")


def tokenize(caption: str) -> TokenizedCaption:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    cleaned = caption.lower().translate(_PUNCT_TABLE)
    return TokenizedCaption(tokens=tuple(cleaned.split()), source=caption)


def _ngram_hits(tokens: tuple[str, ...], keys: dict[str, int], lengths) -> set[int]:
    hits: set[int] = set()
    for n in lengths:
        if n < 1 or n > len(tokens):
            continue
        for start in range(len(tokens) - n + 1):
            phrase = " ".join(tokens[start : start + n])
            idx = keys.get(phrase)
            if idx is not None:
                hits.add(idx)
    return hits


def exact_match(caption: TokenizedCaption, vocab: CategoryVocabulary) -> LabelSet:
    """Classes whose name occurs as a contiguous token n-gram in the caption."""
    names = {name: idx for idx, name in enumerate(vocab.classes)}
    hits = _ngram_hits(caption.tokens, names, vocab._name_ngrams)
    return LabelSet(frozenset(hits), "exact")


def synonym_match(caption: TokenizedCaption, vocab: CategoryVocabulary) -> LabelSet:
    """Classes reached by any token or phrase in the synonym map.

    Superset of :func:`exact_match` because class names map to themselves.
    """
    hits = _ngram_hits(caption.tokens, vocab.synonyms, vocab._syn_ngrams)
    return LabelSet(frozenset(hits), "synonym")


def nearest_embedding_label(
    caption: TokenizedCaption, table: EmbeddingTable, vocab: CategoryVocabulary
) -> LabelSet:
    """The single class nearest (cosine distance) to any caption token.

    Tokens without embeddings are skipped; returns an empty set if none embed.
    Ties break toward the lower class index.
    """
    class_vecs = np.stack([table.class_vector(name) for name in vocab.classes])
    norms = np.linalg.norm(class_vecs, axis=1)
    if np.any(norms == 0):
        zero = vocab.classes[int(np.argmax(norms == 0))]
        raise MissingClassEmbedding(f"zero-norm class vector for {zero!r}")
    unit_classes = class_vecs / norms[:, None]

    best = np.inf
    best_idx = -1
    for token in caption.tokens:
        vec = table.get(token)
        if vec is None:
            continue
        norm = np.linalg.norm(vec)
        if norm == 0:
            continue
        dist = 1.0 - unit_classes @ (vec / norm)
        idx = int(np.argmin(dist))
        if dist[idx] < best:
            best = float(dist[idx])
            best_idx = idx
    if best_idx < 0:
        return LabelSet(frozenset(), "embedding")
    return LabelSet(frozenset({best_idx}), "embedding")


def two_step_labels(caption, vocab, classifier_params, table) -> LabelSet:
    """Exact match first; when nothing matches, fall back to the text classifier.

    An exact hit short-circuits: the classifier is only consulted for captions
    that name none of the categories verbatim.  A caption whose tokens all lack
    embeddings yields an empty classifier-provenance set (the pipeline later
    drops such images from training).
    """
    from .textclf import predict_labels  # local import to avoid a cycle

    exact = exact_match(caption, vocab)
    if exact.present:
        return exact
    try:
        return predict_labels(caption, table, classifier_params)
    except EmptyInput:
        return LabelSet(frozenset(), "classifier")
