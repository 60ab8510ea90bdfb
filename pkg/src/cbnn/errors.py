"""Exception hierarchy shared across the package."""


class CbnnError(Exception):
    """Base class for all package errors."""


class ContractError(CbnnError):
    """A caller violated an operation precondition (dimension mismatch,
    nonpositive variance, invalid argument)."""


class ConditioningError(CbnnError):
    """The constraint-conditioning solve failed (singular Schur factor
    even after jitter)."""


class TrainingError(CbnnError):
    """Non-finite objective or divergence during optimization.

    Carries the last finite variational state and the trace collected so
    far, so callers can persist a usable checkpoint.
    """

    def __init__(self, message, last_state=None, trace=None, diagnostics=None):
        super().__init__(message)
        self.last_state = last_state
        self.trace = trace if trace is not None else []
        self.diagnostics = diagnostics if diagnostics is not None else {}


class ConfigError(CbnnError):
    """Malformed or inconsistent user configuration."""
