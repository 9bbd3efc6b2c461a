"""Exception taxonomy shared by all volnet modules."""


class VolnetError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShape(VolnetError):
    """A tensor shape is empty or has a non-positive extent."""


class CropOutOfBounds(VolnetError):
    """A crop window does not fit inside the source tensor."""


class ShapeMismatch(VolnetError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidAxes(VolnetError):
    """A reduction was requested over an empty or out-of-range axis set."""


class DegenerateBatch(VolnetError):
    """Batch statistics were requested over fewer than two elements."""


class InvalidConfig(VolnetError):
    """A configuration value is outside its documented domain."""


class InvalidMode(VolnetError):
    """An operation was called in a mode that does not support it."""


class InvalidTarget(VolnetError):
    """A classification target is not a valid one-hot vector."""


class NumericError(VolnetError):
    """A non-finite value appeared where a finite one is required."""


class DuplicateSubject(VolnetError):
    """A manifest lists the same subject id twice."""


class InvalidLabel(VolnetError):
    """A class label is not one of the known diagnostic classes."""


class ParseError(VolnetError):
    """A manifest row or config document is structurally malformed."""


class FormatError(VolnetError):
    """A binary file does not conform to its declared format."""


class InsufficientSubjects(VolnetError):
    """A class has too few subjects for the requested split or batch."""


class InvalidSampleCount(VolnetError):
    """A confidence interval was requested for zero samples."""


class IoError(VolnetError):
    """Filesystem operation failed while writing dataset artifacts."""
