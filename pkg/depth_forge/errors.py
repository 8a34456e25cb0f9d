"""Exception hierarchy shared by every depth-forge module.

Each error carries the process exit code the CLI uses when it escapes a
subcommand.
"""

from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_INTERNAL = 4


class ForgeError(Exception):
    """Base class for depth-forge errors."""

    exit_code = EXIT_INTERNAL


class ConfigError(ForgeError):
    """Invalid configuration, CLI arguments or missing inputs."""

    exit_code = EXIT_CONFIG


class ManifestError(ConfigError):
    """A manifest file failed validation."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)


class DomainError(ForgeError):
    """A numeric precondition was violated (non-positive depth, gt <= 0, ...)."""


class BehindCameraError(DomainError):
    """A point with z <= 0 cannot be projected."""


class DegenerateInputError(DomainError):
    """Input produces an empty or oversized image after a transform."""


class OutOfBoundsError(DomainError):
    """A pixel lies outside the image it refers to."""


class InfeasibleCropError(DomainError):
    """No crop can contain every required pixel."""


class ParseError(ForgeError):
    """A model answer could not be turned into a number.

    ``reason`` is one of ``no_number``, ``ambiguous`` or ``domain``.
    """

    NO_NUMBER = "no_number"
    AMBIGUOUS = "ambiguous"
    DOMAIN = "domain"

    def __init__(self, reason: str, raw_text: str = ""):
        self.reason = reason
        self.raw_text = raw_text
        super().__init__(f"unparsable answer ({reason}): {raw_text[:80]!r}")


class TransportError(ForgeError):
    """The inference endpoint could not be reached after all retries."""

    exit_code = EXIT_TRANSPORT

    def __init__(self, message: str, last_status: Optional[int] = None):
        self.last_status = last_status
        super().__init__(message)


class ProtocolError(TransportError):
    """The endpoint answered with a non-transient error or a malformed body."""


class InvariantError(ForgeError):
    """An internal consistency check failed."""
