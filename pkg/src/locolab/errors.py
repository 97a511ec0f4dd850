"""Exception types shared across the package."""


class LocoError(Exception):
    """Base class for all package errors."""


class DomainError(LocoError, ValueError):
    """An argument lies outside the domain where the quantity is defined
    (e.g. a timestep outside [0, 1], or t = 0 for a density)."""


class ModelError(LocoError, ValueError):
    """A subspace model violates its construction invariants."""


class CapacityError(LocoError, ValueError):
    """A dense path was requested for a dimension above the size guard."""


class DegenerateDirectionError(LocoError):
    """Nullspace projection left (almost) nothing of the picked direction."""


class ConfigError(LocoError, ValueError):
    """Invalid configuration key or value."""
