"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file does not follow its declared binary layout (bad magic, bad header)."""


class SizeError(FormatError):
    """A payload is truncated or does not match the size implied by its header."""


class DataError(ValueError):
    """Decoded values violate a data invariant (non-finite, negative, out of range)."""


class ConfigError(ValueError):
    """A configuration value is out of its documented domain."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its preconditions."""


class GradCheckError(RuntimeError):
    """Finite-difference verification could not be completed."""
