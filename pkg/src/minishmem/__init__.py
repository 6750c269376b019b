"""minishmem: an in-process symmetric-memory runtime and cost simulator.

Ranks are execution contexts inside one process.  The package provides the
one-sided primitive set (puts/gets, signals, atomics, acquire/release,
node-scope multimem), a low-latency flag-slot codec, an async-task layer,
overlap-oriented collectives, tile swizzle schedules, a discrete-event cost
model, and a distributed autotuner.
"""

from .core import (
    LocalBuffer,
    RankCtx,
    SignalSet,
    SymHandle,
    World,
    WorldSpec,
    init_world,
)
from .errors import (
    AllocationError,
    ArgumentError,
    CapacityError,
    CollectiveFault,
    ConfigurationError,
    OverlapInfeasibleError,
    RangeError,
    ShmemError,
    SynchronizationFault,
    UsageError,
)
from .primitives import Pe, SignalOp, Token, WaitCond, consume_token

__all__ = [
    "AllocationError",
    "ArgumentError",
    "CapacityError",
    "CollectiveFault",
    "ConfigurationError",
    "LocalBuffer",
    "OverlapInfeasibleError",
    "Pe",
    "RangeError",
    "RankCtx",
    "ShmemError",
    "SignalOp",
    "SignalSet",
    "SymHandle",
    "SynchronizationFault",
    "Token",
    "UsageError",
    "WaitCond",
    "World",
    "WorldSpec",
    "consume_token",
    "init_world",
]

__version__ = "0.1.0"
