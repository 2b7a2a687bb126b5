"""Exception taxonomy shared across the package."""


class StarSimError(Exception):
    """Base class for all starsim errors."""


class ShapeError(StarSimError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(StarSimError, ValueError):
    """Input lies outside an operation's mathematical domain."""


class ConfigError(StarSimError, ValueError):
    """Invalid configuration value."""
