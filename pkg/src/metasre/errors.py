"""Exception types shared across the package."""


class MetasreError(Exception):
    """Base class for all package-specific errors."""


class InvalidValue(MetasreError):
    """A tensor value is NaN or infinite where finite values are required."""


class ShapeError(MetasreError):
    """Operand shapes do not conform to the operation's contract."""


class InvalidDistribution(MetasreError):
    """A probability row does not sum to one, or a target row is not one-hot."""


class NotScalar(MetasreError):
    """Differentiation was requested for a non-scalar objective."""


class SpanError(MetasreError):
    """Entity spans are out of range, overlapping, or the mention is too long."""


class VocabError(MetasreError):
    """A token id falls outside the embedding table."""


class EmptyCorpus(MetasreError):
    """A vocabulary was requested for an empty corpus."""


class ConfigError(MetasreError):
    """A configuration value is missing, malformed, or inconsistent."""


class EmptyBatch(MetasreError):
    """A batch that must be nonempty was empty."""


class NonFiniteGradient(MetasreError):
    """Training produced a NaN/Inf gradient; the run is aborted.

    When raised by the self-training driver, ``report`` carries the partial
    training report accumulated up to the failing iteration.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SplitError(MetasreError):
    """A requested split or partition is infeasible for the dataset."""


class ParseError(MetasreError):
    """A JSONL line could not be parsed into a relation mention."""


class LabelError(MetasreError):
    """A relation name is not part of the dataset's label set."""


class DiagnosticsError(MetasreError):
    """A diagnostic needs hidden gold labels that are not available."""
