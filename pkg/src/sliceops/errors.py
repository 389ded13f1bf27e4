"""Exception types shared across the package."""


class DomainError(ValueError):
    """A point or parameter lies outside the admissible region."""


class TableError(ValueError):
    """A recurrence table is too short for the requested operation."""


class NumericalFailure(RuntimeError):
    """A numerical procedure failed to reach its tolerance."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class CorruptCacheError(RuntimeError):
    """A cache file failed its checksum or format check."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""
