"""Exception hierarchy shared by all jigmil modules."""


class JigmilError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(JigmilError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(JigmilError):
    """Invalid configuration value, unknown key, or inconsistent settings."""


class DataError(JigmilError):
    """Input data violates a documented invariant (range, finiteness, ...)."""


class FormatError(JigmilError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(JigmilError):
    """A caller broke an operation's precondition or postcondition contract."""


class DegenerateSegmentError(ContractError):
    """A softmax segment has no positive weight; identifies the segment."""

    def __init__(self, segment):
        super().__init__(f"segment {segment} has all-zero weights")
        self.segment = segment


class NumericError(JigmilError):
    """A forward computation produced NaN/Inf, which is an error state."""


class EvaluationError(JigmilError):
    """A checked function returned a non-finite value during verification."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, slide_id, epoch, detail=""):
        msg = f"non-finite loss on slide {slide_id!r} at epoch {epoch}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
        self.slide_id = slide_id
        self.epoch = epoch


class UndefinedMetricError(JigmilError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class UnsupportedOperationError(JigmilError):
    """The model variant does not support the requested operation."""


class InternalError(JigmilError):
    """An internal consistency check failed; indicates a bug."""
