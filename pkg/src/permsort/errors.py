"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its documented contract."""


class DivergenceError(FloatingPointError):
    """A tensor or loss became NaN or infinite."""


class CheckpointVersionError(ValueError):
    """A checkpoint manifest does not match what the loader expects."""
