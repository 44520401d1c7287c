"""Exception hierarchy shared across the package."""


class PrVipeError(Exception):
    """Base class for all package errors."""


class DegeneratePose(PrVipeError, ValueError):
    """A pose cannot be normalized or aligned (zero scale, collinear joints)."""


class BehindCamera(PrVipeError, ValueError):
    """A joint falls too close to, or behind, the camera plane."""


class NonFiniteActivation(PrVipeError, FloatingPointError):
    pass


class NonFiniteLoss(PrVipeError, FloatingPointError):
    pass


class NoValidNegative(PrVipeError, ValueError):
    """Every in-batch candidate matches the anchor in 3D."""


class InsufficientData(PrVipeError, ValueError):
    pass


class EmptyIndex(PrVipeError, ValueError):
    pass


class EmptySequence(PrVipeError, ValueError):
    pass


class SequenceTooShort(PrVipeError, ValueError):
    pass


class DegenerateCovariance(PrVipeError, ValueError):
    pass


class VersionMismatch(PrVipeError, ValueError):
    """Checkpoint or dataset header does not match what the caller expects."""


class CorruptCheckpoint(PrVipeError, ValueError):
    pass


class ParseError(PrVipeError, ValueError):
    pass


class SchemaError(PrVipeError, ValueError):
    pass


class ConfigError(PrVipeError, ValueError):
    pass
