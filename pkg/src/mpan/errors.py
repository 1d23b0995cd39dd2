"""Exception types shared across the package.

Each class marks one contract-violation flavor so tests and callers can
distinguish a bad shape from a bad label from a corrupt file.
"""


class MpanError(ValueError):
    """Base class for all package-specific errors."""


class DimensionError(MpanError):
    """Array shapes are incompatible for the requested operation."""


class LabelError(MpanError):
    """An integer class label lies outside its valid range."""


class DomainError(MpanError):
    """A numeric input lies outside an operation's domain (e.g. log of <= 0)."""


class ContractError(MpanError):
    """A precondition unrelated to shapes or labels was violated."""


class GeometryError(MpanError):
    """Image/patch geometry is inconsistent (non-square rotation, crop > cell, ...)."""


class CapacityError(MpanError):
    """More items were requested than the underlying set can supply."""


class StalenessError(MpanError):
    """A sample id refers to a pool the current pseudo-labels were not built from."""


class ConfigError(MpanError):
    """A configuration file or value is invalid."""


class IntegrityError(MpanError):
    """A persisted artifact is truncated, corrupt, or missing required entries."""


class CompatibilityError(MpanError):
    """A checkpoint does not match the model built from the active config."""


class NonFiniteLossError(MpanError):
    """A loss value became NaN or infinite during training."""
