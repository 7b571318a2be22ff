"""Exception hierarchy shared by all modules."""


class ReplicaQfiError(Exception):
    """Base class for all package errors."""


class NumericsError(ReplicaQfiError):
    """A low-level linear-algebra routine failed or produced non-finite data."""


class ModelError(ReplicaQfiError):
    """Inconsistent or unsupported sensor-model definition."""


class ConfigError(ReplicaQfiError):
    """Invalid run configuration (schema or semantic)."""


class PropagationError(ReplicaQfiError):
    """Time propagation failed (non-finite state, exhausted bond dimension, ...)."""


class ResourceLimitError(ReplicaQfiError):
    """Requested computation exceeds a configured size limit."""
