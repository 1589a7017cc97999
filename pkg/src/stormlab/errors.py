"""Exception hierarchy shared across stormlab."""


class StormlabError(Exception):
    """Base class for all framework errors."""


class ConfigError(StormlabError):
    """Config file could not be parsed, or names an unknown key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class ValidationError(ConfigError):
    """Config parsed but violates an invariant."""


class ConfigurationError(StormlabError):
    """Backends or components were wired together inconsistently."""


class DomainError(StormlabError, ValueError):
    """An input lies outside the domain of an operation."""


class TransportError(StormlabError):
    """A remote backend could not be reached. Retryable."""


class ProtocolError(StormlabError):
    """A backend answered, but not in the expected form."""

    def __init__(self, message: str, raw_response=None):
        super().__init__(message)
        self.raw_response = raw_response


class PartialResultError(StormlabError):
    """Some items could not be processed after all retries."""

    def __init__(self, failed_ids, partial=None):
        failed_ids = sorted(failed_ids)
        super().__init__(f"assessment failed for {len(failed_ids)} item(s): {', '.join(failed_ids)}")
        self.failed_ids = failed_ids
        self.partial = partial


class InitializationError(StormlabError):
    """The pseudo-label database could not be initialized."""

    def __init__(self, message: str, ids=()):
        super().__init__(message)
        self.ids = list(ids)


class LoadError(StormlabError):
    """A persisted artifact is corrupt or incomplete."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingError(StormlabError):
    """Training could not start or continue."""


class DivergenceError(TrainingError):
    """A loss became non-finite."""

    def __init__(self, message: str, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
