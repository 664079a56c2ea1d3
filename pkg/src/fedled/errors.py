"""Exception hierarchy shared by every fedled module.

Each error class maps to one CLI exit code (see ``fedled.cli``).
"""


class FedLEDError(Exception):
    """Base class for all fedled errors."""

    exit_code = 1


class DimensionError(FedLEDError, ValueError):
    """Tensor shapes do not agree."""


class DomainError(FedLEDError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(FedLEDError, ValueError):
    """A precondition on arguments was violated."""


class ConfigError(FedLEDError, ValueError):
    exit_code = 2


class DataError(FedLEDError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProtocolError(FedLEDError):
    exit_code = 4


class FramingError(ProtocolError):
    """Byte stream ended inside a frame or a frame is internally inconsistent."""


class BoundsError(ProtocolError):
    """A decoded dimension product exceeds the allowed element count."""


class TransportError(ProtocolError):
    """Peer went silent or the underlying channel failed."""


class AuditError(FedLEDError):
    exit_code = 5

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)
