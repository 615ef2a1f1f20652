"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inconsistent dimensions, invalid model declarations, or bad inputs."""


class ParameterError(ValueError):
    """Parameter values outside their admissible range (e.g. phi <= 0)."""


class NumericError(RuntimeError):
    """Non-finite objective/gradient or a solver that cannot proceed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoOverlapError(RuntimeError):
    """No observed action matched the candidate policy; IPTW is undefined."""
