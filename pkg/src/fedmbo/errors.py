"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.message = message
        self.key = key

    def __str__(self):
        msg = super().__str__()
        if self.key is not None:
            return f"{self.key}: {msg}"
        return msg


class NumericAbort(RuntimeError):
    """A run produced a non-finite iterate or gradient.

    ``diagnostic`` holds the last record row (with the offending values) so
    callers can persist it before exiting.
    """

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic
