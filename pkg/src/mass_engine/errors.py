"""Exception types shared across the engine."""


class MassError(Exception):
    """Base class for engine errors."""


class DataLoadError(MassError):
    """A dataset directory is missing files or is internally inconsistent."""


class ConfigurationError(MassError, ValueError):
    """Invalid configuration detected at build time."""


class ContractViolation(MassError, ValueError):
    """Inputs break an operation's preconditions (shape mismatch, misalignment)."""


class ProviderError(MassError):
    """A decision provider failed after exhausting its retries."""


class SelectionRejected(ProviderError):
    """The provider kept returning an illegal or wrong-sized selection.

    ``codes`` carries the last raw response so callers can repair it.
    """

    def __init__(self, message: str, codes: list[str]):
        super().__init__(message)
        self.codes = codes


class ConfigMismatch(MassError):
    """A run store was created with a different configuration."""

    def __init__(self, changed: list[str]):
        super().__init__(f"configuration differs from stored run in: {', '.join(changed)}")
        self.changed = changed


class IncompleteStore(MassError):
    """A run store lacks an artifact a command needs."""
