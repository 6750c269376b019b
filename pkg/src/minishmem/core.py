"""World construction and the symmetric heap.

All ranks live in one process.  The heap is a single arena split into
``world_size`` equal slabs; a symmetric handle is an (offset, length) pair
that resolves into any rank's slab by plain arithmetic.  Signal words are
64-bit unsigned integers kept in a dedicated pad at the tail of each slab so
algorithms can address them as ``base + rank``.
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass

from .errors import (
    AllocationError,
    ArgumentError,
    CollectiveFault,
    ConfigurationError,
    RangeError,
)
from .sched import Scheduler

SIG_BYTES = 8
_U64 = struct.Struct("<Q")
U64_MASK = (1 << 64) - 1

# copy granularity in cooperative modes; multiple of 8 so slot-sized units
# are never split by a handoff
_CHUNK = 64


@dataclass(frozen=True)
class WorldSpec:
    """Rank/node geometry plus per-rank slab sizing."""

    world_size: int
    n_nodes: int = 1
    local_world_size: int | None = None
    heap_bytes: int = 1 << 20
    signal_count: int | None = None
    timeout_s: float = 5.0

    def __post_init__(self):
        lws = self.local_world_size
        if lws is None:
            if self.world_size % self.n_nodes:
                raise ConfigurationError(
                    f"world_size {self.world_size} not divisible by n_nodes {self.n_nodes}"
                )
            lws = self.world_size // self.n_nodes
            object.__setattr__(self, "local_world_size", lws)
        if self.world_size < 1 or self.n_nodes < 1 or lws < 1:
            raise ConfigurationError("world_size, n_nodes, local_world_size must be >= 1")
        if self.world_size != self.n_nodes * lws:
            raise ConfigurationError(
                f"world_size {self.world_size} != n_nodes {self.n_nodes} x local {lws}"
            )
        if self.heap_bytes <= 0:
            raise ConfigurationError("heap_bytes must be > 0")
        if self.signal_count is None:
            object.__setattr__(self, "signal_count", max(4 * self.world_size, 64))
        if self.signal_count < self.world_size:
            raise ConfigurationError("signal_count must be >= world_size")


@dataclass(frozen=True)
class RankCtx:
    """Execution identity of one rank."""

    rank: int
    node_id: int
    local_rank: int


@dataclass(frozen=True)
class SymHandle:
    """Rank-independent (offset, length) into every rank's slab."""

    offset: int
    length: int

    def check(self, off, nbytes):
        if off < 0 or nbytes < 0 or off + nbytes > self.length:
            raise RangeError(
                f"access [{off}, {off + nbytes}) outside handle of {self.length} bytes"
            )


class LocalBuffer:
    """Plain per-rank byte region; only the owning rank may touch it."""

    def __init__(self, owner, nbytes):
        self.owner = owner
        self.data = bytearray(nbytes)

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class SignalSet:
    """A contiguous group of signal words in the symmetric pad."""

    base: int
    count: int

    def at(self, i):
        if i < 0 or i >= self.count:
            raise ArgumentError(f"signal index {i} out of {self.count}")
        return self.base + i


class _Barrier:
    """Sense-reversing rendezvous; the phase counter never wraps in practice."""

    def __init__(self, parties):
        self.parties = parties
        self.count = 0
        self.phase = 0
        self.lock = threading.Lock()

    def arrive_and_wait(self, sched, what, timeout=None):
        with self.lock:
            my_phase = self.phase
            self.count += 1
            if self.count == self.parties:
                self.count = 0
                self.phase += 1
                return
        sched.wait_for(lambda: self.phase != my_phase, what=what, timeout=timeout)


class _PendingOp:
    __slots__ = ("seq", "peer", "epoch", "apply", "kind")

    def __init__(self, seq, peer, epoch, apply, kind):
        self.seq = seq
        self.peer = peer
        self.epoch = epoch
        self.apply = apply
        self.kind = kind


class World:
    """Shared substrate: arena, allocators, barriers, pending transfers,
    instrumentation, and a persistent worker thread per rank."""

    def __init__(self, spec: WorldSpec, scheduler="free", seed=0):
        self.spec = spec
        if isinstance(scheduler, Scheduler):
            self.sched = scheduler
        else:
            self.sched = Scheduler(scheduler, seed=seed, timeout_s=spec.timeout_s)
        self.sched.set_network(self._net_size, self._net_apply_one)

        self._stride = spec.heap_bytes + SIG_BYTES * spec.signal_count
        self._arena = bytearray(spec.world_size * self._stride)
        self._heap_cursor = 0
        self._sig_cursor = 0
        self._alloc_lock = threading.Lock()
        self._sig_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._counters = [dict() for _ in range(spec.world_size)]
        self._trace = None
        self._pending = [deque() for _ in range(spec.world_size)]
        self._pending_lock = threading.Lock()
        self._fence_epoch = [0] * spec.world_size
        self._op_seq = 0

        self._global_barrier = _Barrier(spec.world_size)
        self._node_barriers = [_Barrier(spec.local_world_size) for _ in range(spec.n_nodes)]
        self._bcast_lock = threading.Lock()
        self._bcast_state = {"root": None, "arrived": 0, "phase": 0}

        lws = spec.local_world_size
        self.ranks = [RankCtx(r, r // lws, r % lws) for r in range(spec.world_size)]
        from .primitives import Pe  # late import: Pe builds on World

        self.pes = [Pe(self, ctx) for ctx in self.ranks]

        self._workers = None
        self._jobs = None
        self._results = None
        self._closed = False

    # ------------------------------------------------------------------
    # geometry helpers

    @property
    def world_size(self):
        return self.spec.world_size

    @property
    def n_nodes(self):
        return self.spec.n_nodes

    @property
    def local_world_size(self):
        return self.spec.local_world_size

    def node_ranks(self, node_id):
        lws = self.spec.local_world_size
        return range(node_id * lws, (node_id + 1) * lws)

    # ------------------------------------------------------------------
    # symmetric allocation

    def alloc_symmetric(self, nbytes, align=8):
        """Bump-allocate ``nbytes`` in every rank's slab at the same offset."""
        if nbytes < 0:
            raise ArgumentError("negative allocation")
        if align < 1 or align & (align - 1):
            raise ArgumentError(f"alignment {align} is not a power of two")
        with self._alloc_lock:
            off = (self._heap_cursor + align - 1) & ~(align - 1)
            if off + nbytes > self.spec.heap_bytes:
                raise AllocationError(
                    f"heap exhausted: need {nbytes} at {off}, slab is {self.spec.heap_bytes}"
                )
            self._heap_cursor = off + nbytes
        return SymHandle(off, nbytes)

    def alloc_signals(self, count):
        """Reserve ``count`` consecutive signal words in every rank's pad."""
        if count < 0:
            raise ArgumentError("negative signal allocation")
        with self._alloc_lock:
            base = self._sig_cursor
            if base + count > self.spec.signal_count:
                raise AllocationError(
                    f"signal pad exhausted: need {count} at {base}, pad is {self.spec.signal_count}"
                )
            self._sig_cursor = base + count
        return SignalSet(base, count)

    # ------------------------------------------------------------------
    # raw memory

    def _slab_base(self, rank):
        return rank * self._stride

    def heap_view(self, rank, handle: SymHandle, off=0, nbytes=None):
        """Writable view of ``rank``'s replica of ``handle``."""
        if rank < 0 or rank >= self.spec.world_size:
            raise ArgumentError(f"peer {rank} out of range (world {self.spec.world_size})")
        n = handle.length - off if nbytes is None else nbytes
        handle.check(off, n)
        start = self._slab_base(rank) + handle.offset + off
        return memoryview(self._arena)[start : start + n]

    def _abs(self, rank, handle, off, nbytes):
        handle.check(off, nbytes)
        return self._slab_base(rank) + handle.offset + off

    def _sig_abs(self, rank, sig):
        if sig < 0 or sig >= self.spec.signal_count:
            raise ArgumentError(f"signal {sig} out of pad of {self.spec.signal_count}")
        return self._slab_base(rank) + self.spec.heap_bytes + SIG_BYTES * sig

    def sig_read(self, rank, sig):
        return _U64.unpack_from(self._arena, self._sig_abs(rank, sig))[0]

    def sig_set(self, rank, sig, value):
        with self._sig_lock:
            _U64.pack_into(self._arena, self._sig_abs(rank, sig), value & U64_MASK)

    def sig_add(self, rank, sig, delta):
        """Wrap-around add; returns the old value."""
        off = self._sig_abs(rank, sig)
        with self._sig_lock:
            old = _U64.unpack_from(self._arena, off)[0]
            _U64.pack_into(self._arena, off, (old + delta) & U64_MASK)
        return old

    def sig_cas(self, rank, sig, expected, desired):
        off = self._sig_abs(rank, sig)
        with self._sig_lock:
            old = _U64.unpack_from(self._arena, off)[0]
            if old == expected:
                _U64.pack_into(self._arena, off, desired & U64_MASK)
        return old

    def zero_all_signals(self):
        for r in range(self.spec.world_size):
            base = self._slab_base(r) + self.spec.heap_bytes
            self._arena[base : base + SIG_BYTES * self.spec.signal_count] = bytes(
                SIG_BYTES * self.spec.signal_count
            )

    def sweep_signals(self):
        """Return {(rank, sig): value} for every nonzero signal word."""
        hot = {}
        for r in range(self.spec.world_size):
            for s in range(self.spec.signal_count):
                v = self.sig_read(r, s)
                if v:
                    hot[(r, s)] = v
        return hot

    # ------------------------------------------------------------------
    # copies (the only write paths into remote slabs)

    def copy_into(self, rank, handle, off, payload, chunked=None):
        """Write ``payload`` into rank's replica.  In cooperative modes the
        copy proceeds in 8-byte-multiple chunks with handoff points between
        them, so partial payloads are observable -- exactly what the
        data-before-signal stress tests need."""
        n = len(payload)
        start = self._abs(rank, handle, off, n)
        if chunked is None:
            chunked = self.sched.controlled
        if not chunked or n <= _CHUNK:
            self._arena[start : start + n] = payload
            return
        pos = 0
        while pos < n:
            end = min(pos + _CHUNK, n)
            self._arena[start + pos : start + end] = payload[pos:end]
            pos = end
            if pos < n:
                self.sched.checkpoint()

    def read_from(self, rank, handle, off, nbytes):
        start = self._abs(rank, handle, off, nbytes)
        return bytes(self._arena[start : start + nbytes])

    # ------------------------------------------------------------------
    # deferred (non-blocking) transfers

    def enqueue_op(self, rank, peer, apply, kind):
        with self._pending_lock:
            self._op_seq += 1
            op = _PendingOp(self._op_seq, peer, self._fence_epoch[rank], apply, kind)
            self._pending[rank].append(op)

    def fence_rank(self, rank):
        with self._pending_lock:
            self._fence_epoch[rank] += 1

    def quiet_rank(self, rank):
        """Apply every pending op of ``rank`` (fence order kept per peer)."""
        while True:
            with self._pending_lock:
                if not self._pending[rank]:
                    return
                op = self._pending[rank].popleft()
            op.apply()

    def pending_count(self, rank=None):
        with self._pending_lock:
            if rank is not None:
                return len(self._pending[rank])
            return sum(len(q) for q in self._pending)

    def _net_size(self):
        return sum(len(q) for q in self._pending)

    def _net_apply_one(self, rng):
        """Apply one eligible pending op: any op with no earlier unapplied op
        to the same (rank, peer) in a lower fence epoch."""
        with self._pending_lock:
            eligible = []
            for q in self._pending:
                seen = {}
                for op in q:
                    key = op.peer
                    if key not in seen:
                        seen[key] = op.epoch
                    if op.epoch == seen[key]:
                        eligible.append((q, op))
            if not eligible:
                return
            q, op = rng.choice(eligible) if rng is not None else eligible[0]
            q.remove(op)
        op.apply()

    # ------------------------------------------------------------------
    # rendezvous

    def barrier_wait(self, rank, timeout=None):
        self._global_barrier.arrive_and_wait(self.sched, f"barrier_all (rank {rank})", timeout)

    def node_barrier_wait(self, ctx, timeout=None):
        self._node_barriers[ctx.node_id].arrive_and_wait(
            self.sched, f"barrier_all_intra_node (rank {ctx.rank})", timeout
        )

    def agree_broadcast_root(self, rank, root, timeout=None):
        """All ranks post their root; mismatch is a configuration error."""
        with self._bcast_lock:
            st = self._bcast_state
            if st["arrived"] == 0:
                st["root"] = root
                st["mismatch"] = False
            elif st["root"] != root:
                st["mismatch"] = True
            st["arrived"] += 1
            if st["arrived"] == self.spec.world_size:
                st["arrived"] = 0
                st["phase"] += 1
                bad = st["mismatch"]
                if bad:
                    raise ConfigurationError("broadcast called with mismatched roots")
                return
            my_phase = st["phase"]
        self.sched.wait_for(
            lambda: self._bcast_state["phase"] != my_phase,
            what=f"broadcast root agreement (rank {rank})",
            timeout=timeout,
        )
        if self._bcast_state.get("mismatch"):
            raise ConfigurationError("broadcast called with mismatched roots")

    # ------------------------------------------------------------------
    # instrumentation

    def bump(self, rank, name, n=1):
        with self._stats_lock:
            c = self._counters[rank]
            c[name] = c.get(name, 0) + n

    def counters(self, rank):
        with self._stats_lock:
            return dict(self._counters[rank])

    def reset_counters(self):
        with self._stats_lock:
            for c in self._counters:
                c.clear()

    def start_trace(self):
        self._trace = []

    def stop_trace(self):
        t, self._trace = self._trace, None
        return t or []

    def trace_event(self, rank, op, **info):
        t = self._trace
        if t is not None:
            t.append({"rank": rank, "op": op, **info})

    # ------------------------------------------------------------------
    # launching rank functions

    def run(self, fn, timeout=None):
        """Run ``fn(pe)`` on every rank concurrently; returns per-rank results.

        Raises CollectiveFault aggregating per-rank exceptions; the first
        failure aborts blocked siblings through the scheduler fault channel.
        """
        if self._closed:
            raise ConfigurationError("world is closed")
        self._ensure_workers()
        if getattr(self, "_dirty", False):
            self._reset_after_fault()
        self.sched.clear_fault()
        if self.sched.controlled:
            self.sched.stage([f"r{r}" for r in range(self.spec.world_size)])
        for q in self._jobs:
            q.append(fn)
        for ev in self._job_events:
            ev.set()
        deadline_factor = 4.0
        wait_s = (timeout or self.spec.timeout_s) * deadline_factor + 30.0
        results, failures = [], {}
        for r in range(self.spec.world_size):
            if not self._done_events[r].wait(wait_s):
                failures[r] = TimeoutError(f"rank {r} did not finish")
                continue
            self._done_events[r].clear()
            ok, val = self._results[r]
            if ok:
                results.append(val)
            else:
                failures[r] = val
        if failures:
            self._dirty = True
            raise CollectiveFault(
                "collective failed on ranks "
                + ", ".join(f"{r}: {type(e).__name__}: {e}" for r, e in sorted(failures.items())),
                failures,
            )
        return results

    def recover(self):
        """Clear faults and rendezvous/transfer state after a failed run, so
        the world can host further collectives."""
        self._reset_after_fault()
        self.sched.clear_fault()

    def _reset_after_fault(self):
        """Discard rendezvous and transfer state left behind by a failed run."""
        self._global_barrier = _Barrier(self.spec.world_size)
        self._node_barriers = [
            _Barrier(self.spec.local_world_size) for _ in range(self.spec.n_nodes)
        ]
        with self._bcast_lock:
            self._bcast_state = {"root": None, "arrived": 0, "phase": 0}
        with self._pending_lock:
            for q in self._pending:
                q.clear()
        self._dirty = False

    def _ensure_workers(self):
        if self._workers is not None:
            return
        n = self.spec.world_size
        self._jobs = [deque() for _ in range(n)]
        self._job_events = [threading.Event() for _ in range(n)]
        self._done_events = [threading.Event() for _ in range(n)]
        self._results = [None] * n
        self._workers = []
        for r in range(n):
            t = threading.Thread(target=self._worker_loop, args=(r,), daemon=True, name=f"rank{r}")
            t.start()
            self._workers.append(t)

    def _worker_loop(self, rank):
        pe = self.pes[rank]
        while True:
            self._job_events[rank].wait()
            self._job_events[rank].clear()
            if self._closed:
                return
            while self._jobs[rank]:
                fn = self._jobs[rank].popleft()
                try:
                    self.sched.register(f"r{rank}")
                    try:
                        val = fn(pe)
                    finally:
                        self.sched.unregister()
                    self._results[rank] = (True, val)
                except BaseException as exc:  # propagate to run()
                    self._results[rank] = (False, exc)
                    from .errors import SynchronizationFault

                    self.sched.set_fault(
                        SynchronizationFault(
                            f"aborted: rank {rank} failed with {type(exc).__name__}: {exc}"
                        )
                    )
                self._done_events[rank].set()

    def close(self):
        if self._closed:
            return
        self._closed = True
        if self._workers:
            for ev in self._job_events:
                ev.set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def init_world(spec: WorldSpec, scheduler="free", seed=0) -> World:
    """Materialize the world: rank contexts, zeroed slabs and signal pads."""
    return World(spec, scheduler=scheduler, seed=seed)
