"""Exception hierarchy with stable, machine-parsable categories.

The CLI prints ``<category>: <message>`` on a single line and exits nonzero;
everything else raises these directly.
"""


class DecaError(Exception):
    category = "error"


class DimensionError(DecaError):
    """Operand shapes do not conform."""

    category = "dimension-error"


class ContractError(DecaError):
    """An operation was called outside its documented precondition."""

    category = "contract-error"


class ConfigError(DecaError):
    """Invalid or inconsistent configuration."""

    category = "config-error"


class DataError(DecaError):
    """Dataset content violates the sample contract."""

    category = "data-error"


class GeometryError(DecaError):
    """Scene geometry unusable (e.g. joint behind the camera)."""

    category = "geometry-error"


class NumericError(DecaError):
    """Non-finite value where a finite one is required."""

    category = "numeric-error"


class DegenerateInputError(DecaError):
    """Input carries no usable signal (e.g. all activations ~ 0)."""

    category = "degenerate-input-error"


class DegeneracyError(DecaError):
    """Point set too degenerate for the requested alignment."""

    category = "degeneracy-error"


class IOError_(DecaError):
    category = "io-error"


class CheckpointVersionError(DecaError):
    category = "checkpoint-version-error"


class CheckpointTruncatedError(DecaError):
    category = "checkpoint-truncated-error"


class CheckpointShapeError(DecaError):
    category = "checkpoint-shape-error"
