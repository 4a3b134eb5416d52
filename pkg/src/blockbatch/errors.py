"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad dimensions, thresholds, empty task lists)."""


class ContractError(RuntimeError):
    """A caller violated an operation precondition."""


class StateError(RuntimeError):
    """An object is in a state that does not permit the operation."""


class RunawayError(RuntimeError):
    """The decode loop exceeded its hard forward-call cap."""


class InsufficientDataError(RuntimeError):
    """A diagnostic was requested on a trace that lacks the required records."""


class DegenerateAnchorError(ValueError):
    """Projection basis requested around a zero anchor vector."""
