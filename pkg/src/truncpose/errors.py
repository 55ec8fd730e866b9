"""Exception types shared across the package.

The CLI maps ConfigError, IoError, and EmptyConfidentSet to distinct
process exit codes; everything else is an ordinary failure.
"""


class TruncposeError(Exception):
    """Base class for all package errors."""


class MissingJoint(TruncposeError):
    """A joint required by an operation carries no annotation."""


class ConfigError(TruncposeError):
    """A run configuration value is missing, malformed, or inconsistent."""


class IoError(TruncposeError):
    """A file is missing, unreadable, or fails format validation."""


class InvalidSpec(TruncposeError):
    """A crop spec with applied=False was passed where a crop is required."""


class EmptyConfidentSet(TruncposeError):
    """A self-training round accepted zero frames."""


class EmptyEvaluation(TruncposeError):
    """No frame in a pool produced a defined metric value."""
