"""Exception types shared across sessionlab."""


class SessionLabError(Exception):
    """Base class for toolkit errors."""


class DataError(SessionLabError, ValueError):
    """Malformed or inconsistent input data."""


class EmbeddingError(SessionLabError):
    """Embedding retrieval, caching or shape failure."""


class ConfigError(SessionLabError, ValueError):
    """Invalid run configuration."""


class TrainingError(SessionLabError, FloatingPointError):
    """Numerical failure during model training."""
