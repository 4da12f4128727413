"""Exception types shared across the package.

Everything derives from MfvulnError so callers can catch broadly; the
subclasses match the failure modes the public operations promise to raise.
"""


class MfvulnError(Exception):
    pass


class InvalidInputError(MfvulnError, ValueError):
    """Malformed value passed to a numeric operation."""


class InvalidConfigError(MfvulnError, ValueError):
    """Config rejected at validation time (bad field, bad combination)."""


class ConfigParseError(InvalidConfigError):
    """Config file failed to parse; message names the offending field."""


class TrainingFailureError(MfvulnError, RuntimeError):
    """Training finished below the required margin.

    Carries both returns so the caller can report the gap.
    """

    def __init__(self, message, trained_return=None, baseline_return=None):
        super().__init__(message)
        self.trained_return = trained_return
        self.baseline_return = baseline_return


class StageDependencyError(MfvulnError, RuntimeError):
    """A pipeline stage ran before the stage it depends on."""


class UndefinedCorrelationError(MfvulnError, ValueError):
    """Correlation requested on a zero-variance sample."""
