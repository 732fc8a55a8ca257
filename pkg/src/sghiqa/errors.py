"""Exception hierarchy.

Every error carries a short ``category`` string; the command-line entry point
prints it as the first token of its one-line error message.
"""


class SGHError(ValueError):
    category = "error"


class InvalidRecordError(SGHError):
    category = "invalid-record"


class CannotSplitError(SGHError):
    category = "cannot-split"


class TooSmallImageError(SGHError):
    category = "too-small-image"


class InvalidConfigError(SGHError):
    category = "invalid-config"


class InvalidInputError(SGHError):
    category = "invalid-input"


class InvalidScaleError(SGHError):
    category = "invalid-scale"


class ConfigurationError(SGHError):
    category = "configuration"


class InvalidSplitError(SGHError):
    category = "invalid-split"


class ZeroVarianceError(SGHError):
    category = "zero-variance"


class InsufficientDataError(SGHError):
    category = "insufficient-data"


class DegenerateGroupError(SGHError):
    category = "degenerate-group"


class WrongFrameworkError(SGHError):
    category = "wrong-framework"


class CheckpointFormatError(SGHError):
    category = "checkpoint-format"
