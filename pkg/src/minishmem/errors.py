"""Exception taxonomy shared by the runtime, collectives, and simulator."""


class ShmemError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ShmemError):
    """Invalid world geometry, topology, or scenario configuration."""


class AllocationError(ShmemError):
    """Symmetric heap or signal pad exhausted."""


class ArgumentError(ShmemError, ValueError):
    """Bad argument: unknown peer, invalid signal index, bad element width."""


class RangeError(ArgumentError):
    """A buffer access falls outside the addressed region."""


class SynchronizationFault(ShmemError):
    """A blocking wait timed out or a deadlock was detected."""


class UsageError(ShmemError):
    """API contract violation: double token consume, role mismatch,
    cross-rank stream wait, signal reset while transfers are in flight."""


class CapacityError(ShmemError):
    """A worst-case-sized receive buffer would overflow."""


class OverlapInfeasibleError(ShmemError):
    """The scatter window is not larger than the cross-node send time, so no
    finite reduction bandwidth yields perfect overlap."""


class CollectiveFault(ShmemError):
    """Aggregated failure of a multi-rank launch.

    ``failures`` maps (rank, stream) or rank to the original exception;
    ``first`` is the earliest recorded one, kept for convenient asserts.
    """

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = dict(failures)
        self.first = next(iter(self.failures.values())) if self.failures else None
