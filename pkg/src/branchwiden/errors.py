"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shapes, ranges, indices)."""


class CorruptionError(ValueError):
    """A persisted file does not match its declared layout."""


class EmptyDataError(ValueError):
    """An operation received no usable samples."""


class TrainingError(RuntimeError):
    """Training produced a non-finite value."""
