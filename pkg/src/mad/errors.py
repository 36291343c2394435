class MADError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(MADError, ValueError):
    """Invalid configuration or arguments."""


class FormatError(MADError, ValueError):
    """A file on disk is missing, corrupt or inconsistent with its manifest."""


class ProtocolError(MADError):
    """An evaluation protocol constraint was violated (e.g. probe provenance)."""


class NumericalAbort(MADError, FloatingPointError):
    """Training produced a non-finite value.

    ``diagnostic`` carries whatever is needed to replay the offending step.
    """

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
