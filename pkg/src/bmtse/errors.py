"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class LengthError(ValueError):
    """Signal too short for the requested operation."""


class ShapeError(ValueError):
    """Mismatched array shapes between related inputs."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class FormatError(ValueError):
    """Malformed file or serialized payload."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss component."""
