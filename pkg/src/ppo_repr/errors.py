"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, unknown options, or inconsistent settings."""


class EpisodeFinishedError(RuntimeError):
    """``step`` was called on an environment whose episode already ended."""
