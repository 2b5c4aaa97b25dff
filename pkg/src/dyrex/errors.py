"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and
FormatError -> 2, numerical/shape/mask failures -> 3.
"""


class DyrexError(Exception):
    """Base class for all package errors."""


class ShapeError(DyrexError):
    """Operand shapes are inconsistent. Message names both shapes."""


class MaskError(DyrexError):
    """A mask leaves a softmax row (or a query) with no allowed entry."""


class ConfigError(DyrexError):
    """Invalid or inconsistent configuration."""


class DataError(DyrexError):
    """Bad training/eval data: malformed lines, truncated gold spans, etc."""


class FormatError(DyrexError):
    """Malformed serialized artifact (matrix file, checkpoint)."""


class NumericsError(DyrexError):
    """Non-finite value where a finite one is required."""
