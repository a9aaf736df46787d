"""Exceptions shared across the pipeline, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration; names the offending field. CLI exit code 2."""


class DataError(RuntimeError):
    """Missing or malformed data on disk. CLI exit code 3."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss encountered during training. CLI exit code 4."""
