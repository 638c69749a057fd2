"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain (checked mode)."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class IntegrityError(RuntimeError):
    """Stored or supplied state does not match what the consumer expects."""


class StructuralError(RuntimeError):
    """A gradient reached a parameter it must not reach (or missed one it must)."""


class ParameterError(ValueError):
    """A function argument is out of its accepted range."""


class IngestionError(OSError):
    """An on-disk dataset could not be read."""


class ProtocolError(ValueError):
    """An evaluation protocol cannot be applied to the given inputs."""
