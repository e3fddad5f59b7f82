"""Weakly supervised detection from captions, at desk scale."""

from .captions import (
    CategoryVocabulary,
    EmbeddingTable,
    LabelSet,
    TokenizedCaption,
    exact_match,
    load_word_vectors,
    nearest_embedding_label,
    synonym_match,
    tokenize,
    two_step_labels,
)
from .config import TrainConfig
from .mil import MILHeadParams, ProposalSet, ScoreBundle, image_label_loss, mil_forward
from .refinement import RefinementStack, instance_targets, refinement_loss, total_loss

__version__ = "0.1.0"
