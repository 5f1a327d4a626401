"""Exception types shared across the package.

The CLI maps these onto stable exit codes: FormatError/DimensionError are
data errors (exit 2), NonFiniteError is a numerical failure (exit 3).
"""


class InnscribeError(Exception):
    pass


class NonFiniteError(InnscribeError, ValueError):
    """A value that must be finite was NaN or infinite."""


class FormatError(InnscribeError, ValueError):
    """A serialized artifact (FRM1, INNCKPT1, label CSV) is malformed."""


class DimensionError(InnscribeError, ValueError):
    """Array shapes disagree with the configured dimension budget."""
