"""Exception types shared across the toolkit."""


class ParseError(ValueError):
    """A manifest or data file is malformed; message carries the line number."""


class MissingProposalFile(FileNotFoundError):
    """A manifest record points at a proposal file that does not exist."""


class MissingClassEmbedding(KeyError):
    """A category name has no word vector, so nearest-neighbor labeling is impossible."""


class EmptyInput(ValueError):
    """No token of a caption could be embedded; there is nothing to pool."""


class NonFiniteScore(ArithmeticError):
    """A model produced NaN or infinite scores; training/inference must stop."""
