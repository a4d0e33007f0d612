"""Exception types raised by the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class MalformedKey(SimError):
    """Key text violates the object-key grammar."""


class BadRegex(SimError):
    """Affinity regex fails to compile or uses a disallowed construct."""


class NoSuchPool(SimError):
    """No registered pool prefix matches the key."""


class DuplicatePool(SimError):
    """Pool path already registered, or nests inside an existing pool path."""


class InsufficientNodes(SimError):
    """Cluster does not have enough nodes for the requested pool."""


class ObjectMissing(SimError):
    """Non-blocking get on a key that is not stored."""


class DuplicatePrefix(SimError):
    """A handler is already registered under this key prefix."""


class DeadlockDetected(SimError):
    """Suspended tasks remain but no events are pending."""


class BadConfig(SimError):
    """Workload or experiment configuration is inconsistent."""


class TraceMismatch(SimError):
    """Experiments being compared were not run over the same trace."""
