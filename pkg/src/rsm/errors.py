"""Exception hierarchy shared across the package."""


class RsmError(Exception):
    """Base class for all errors raised by this package."""


class StorageError(RsmError):
    pass


class StoreClosedError(StorageError):
    pass


class StoreCrashedError(StorageError):
    """Raised by every store operation after a (simulated) crash."""


class TransactionStateError(StorageError):
    """Operation on a transaction that is no longer open."""


class RecoveryError(StorageError):
    """The durable log could not be read back."""


class QueueConflictError(StorageError):
    """Another open transaction holds the queue head."""


class UnknownClassError(RsmError):
    pass


class UnknownFieldError(RsmError):
    pass


class UnknownStateError(RsmError):
    pass


class ContextClosedError(RsmError):
    """Handler context used after the handler finished."""


class UnknownDestinationError(RsmError):
    pass


class HostStoppedError(RsmError):
    """Internal signal: the host is shutting down or has crashed."""
