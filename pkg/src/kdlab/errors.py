"""Exception types shared across kdlab modules.

User-facing errors (bad config, bad files, bad flags) derive from UsageError
so the CLI can map them to exit code 1; everything else under KdlabError maps
to exit code 2.
"""


class KdlabError(Exception):
    """Base class for all kdlab errors."""


class UsageError(KdlabError):
    """Errors caused by invalid user input (configs, flags, file contents)."""


class ShapeError(KdlabError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(KdlabError):
    """A softmax row has no allowed positions."""


class NumericalInstabilityError(KdlabError):
    """A non-finite value appeared where finite math was required."""


class ConfigError(UsageError):
    """An invalid or inconsistent configuration value."""


class VocabularyError(KdlabError):
    """A token id is outside the model vocabulary."""


class TokenizerMismatchError(UsageError):
    """Two models that must share a tokenizer do not."""


class MappingError(KdlabError):
    """Student/teacher layer or head mapping cannot be built or applied."""


class EncodingError(UsageError):
    """Text contains a character outside the fixed alphabet."""


class PackingError(KdlabError):
    """A sample cannot be packed into the configured sequence length."""


class CorpusParseError(UsageError):
    """A corpus file line could not be parsed."""

    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class CheckpointError(UsageError):
    """A checkpoint file is malformed."""


class ComparabilityError(KdlabError):
    """Evaluation reports cannot be compared (different suites)."""


class EmptyLossError(KdlabError):
    """A loss was requested over an empty set of positions."""


class TrainingDivergedError(KdlabError):
    """Training aborted on a non-finite loss."""
