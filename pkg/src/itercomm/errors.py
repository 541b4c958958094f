"""Exception hierarchy shared by every layer of the kernel."""


class IterCommError(Exception):
    """Base class for all library errors."""


class ConfigurationError(IterCommError):
    """Inconsistent graph, partition or run configuration."""


class UsageError(IterCommError):
    """An API call made in a state where it is not allowed."""


class ProtocolError(IterCommError):
    """Peers disagree about the shape or sequencing of messages."""


class ProtocolDeadlockError(ProtocolError):
    """No pending delivery can ever complete the awaited requests."""


class ChannelOverflowError(ProtocolError):
    """Too many unmatched messages queued on a single channel."""


class InfeasiblePartitionError(ConfigurationError):
    """The process count cannot be laid out on the grid."""


class DiscretizationError(ConfigurationError):
    """The stencil would lose strict diagonal dominance."""


class NonConvergenceError(IterCommError):
    """An iteration cap was reached before the stopping criterion held."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations
