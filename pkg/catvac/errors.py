"""
Exception hierarchy shared by every catvac module.

The CLI maps UserError to exit code 1 and InvariantViolation (or anything
unexpected) to exit code 2.
"""


class CatvacError(Exception):
    """Base class for all catvac failures."""
    pass


class UserError(CatvacError):
    """Bad input, configuration or missing files."""
    pass


class InvariantViolation(CatvacError):
    """An internal contract was broken (e.g. a NaN loss)."""
    pass


class ShapeError(UserError):
    """Tensor shapes disagree with the configuration."""
    pass


class NonFiniteError(InvariantViolation):
    """A tensor that must be finite holds NaN or infinity."""
    pass
