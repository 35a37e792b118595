"""Exception types shared across the package."""


class RevPOMDPError(Exception):
    """Base class for all package errors."""


class ConstructionInconsistency(RevPOMDPError):
    """A masked (unreachable) row was queried; signals a builder bug."""


class EnumerationTooLarge(RevPOMDPError):
    """An exhaustive enumeration would exceed the configured cap."""


class BudgetError(RevPOMDPError):
    """A sample or computation budget is too small or too large."""


class ShapeError(RevPOMDPError):
    """Array shapes do not conform."""


class UnsupportedStructure(RevPOMDPError):
    """No admissible construction exists for the given input."""


class ParameterError(RevPOMDPError):
    """Hyperparameters violate a family constraint."""


class PreconditionError(RevPOMDPError):
    """An operation precondition does not hold."""


class ConfigError(RevPOMDPError):
    """An experiment configuration is malformed."""
