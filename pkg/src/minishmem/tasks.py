"""Async-task layer: per-rank programs made of streams.

A stream is a FIFO of tasks belonging to one rank; streams of the same rank
execute concurrently and synchronize through ``stream_wait`` (recorded at
construction time against the waitee's current length, honored at execution
time) or through signals.  Copy-engine streams move bytes without running
compute callbacks.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

from .errors import UsageError


class TaskRole(enum.Enum):
    COMPUTE = "compute"
    COMM_BLOCK = "comm_block"
    COPY_ENGINE = "copy_engine"
    HOST = "host"


@dataclass(frozen=True)
class BlockAssignment:
    """Role of every block of a communication kernel, each id mapped once."""

    roles: dict

    def __post_init__(self):
        n = len(self.roles)
        if sorted(self.roles) != list(range(n)):
            raise UsageError(f"block ids must be exactly 0..{n - 1}")

    def role(self, block_id):
        return self.roles[block_id]


class _Item:
    __slots__ = ("kind", "name", "fn", "waitee", "watermark")

    def __init__(self, kind, name, fn=None, waitee=None, watermark=0):
        self.kind = kind
        self.name = name
        self.fn = fn
        self.waitee = waitee
        self.watermark = watermark


class CopyHandle:
    """Completion handle of a copy_async; observable without joining."""

    def __init__(self, stream, index):
        self.stream = stream
        self.index = index

    def done(self):
        return self.stream.completed > self.index

    def wait(self, pe, timeout=None):
        pe.world.sched.wait_for(self.done, what=f"copy on {self.stream.name}", timeout=timeout)


class Stream:
    def __init__(self, rank, name, role=TaskRole.COMM_BLOCK):
        self.rank = rank
        self.name = name
        self.role = role
        self.items: list[_Item] = []
        self.completed = 0  # finished tasks, updated by the executor

    def enqueue(self, fn, name="task", kind="comm"):
        if self.role is TaskRole.COPY_ENGINE and kind == "compute":
            raise UsageError(f"copy-engine stream {self.name} cannot run compute callbacks")
        self.items.append(_Item("task", name, fn=fn))
        return self

    def wait(self, other: "Stream", upto=None):
        """Tasks enqueued after this point start only once every task ``other``
        currently holds has finished (or its first ``upto`` tasks, which may
        reference tasks enqueued later)."""
        if other.rank != self.rank:
            raise UsageError(
                f"stream {self.name} (rank {self.rank}) cannot wait on "
                f"{other.name} (rank {other.rank})")
        self.items.append(_Item("wait", f"wait({other.name})", waitee=other,
                                watermark=len(other.items) if upto is None else -upto))
        return self

    def task_count(self):
        return sum(1 for it in self.items if it.kind == "task")


def stream_wait(waiter: Stream, waitee: Stream):
    waiter.wait(waitee)


def copy_async(stream: Stream, dst, src, *, peer=None, nbytes=None,
               dst_off=0, src_off=0, name="copy"):
    """Enqueue a DMA-style copy; overlaps with compute tasks and consumes no
    compute capacity in the timed model."""
    if stream.role is not TaskRole.COPY_ENGINE:
        raise UsageError(f"copy_async needs a copy-engine stream, got {stream.role}")
    index = stream.task_count()

    def run(pe):
        target = peer if peer is not None else pe.rank
        pe.putmem(dst, src, target, nbytes=nbytes, dst_off=dst_off, src_off=src_off)

    stream.items.append(_Item("task", name, fn=run))
    return CopyHandle(stream, index)


@dataclass
class TaskRecord:
    rank: int
    stream: str
    task: str
    status: str  # ok | failed
    error: str | None = None
    start_seq: int = -1
    end_seq: int = -1


@dataclass
class Report:
    records: list = field(default_factory=list)

    @property
    def ok(self):
        return all(r.status == "ok" for r in self.records)

    def failures(self):
        return [r for r in self.records if r.status != "ok"]

    def order(self):
        """(rank, stream, task) tuples in observed start order."""
        started = [r for r in self.records if r.start_seq >= 0]
        return [(r.rank, r.stream, r.task) for r in sorted(started, key=lambda r: r.start_seq)]


class _Seq:
    def __init__(self):
        self.v = 0
        self.lock = threading.Lock()

    def next(self):
        with self.lock:
            self.v += 1
            return self.v


def _exec_stream(pe, stream, records, seq):
    for item in stream.items:
        if item.kind == "wait":
            if item.watermark < 0:  # explicit task count
                want = -item.watermark
            else:
                want = sum(1 for it in item.waitee.items[: item.watermark]
                           if it.kind == "task")
            pe.world.sched.wait_for(
                lambda: item.waitee.completed >= want,
                what=f"{stream.name} waiting on {item.waitee.name} (rank {pe.rank})")
            continue
        rec = TaskRecord(pe.rank, stream.name, item.name, "ok")
        records.append(rec)
        rec.start_seq = seq.next()
        try:
            item.fn(pe)
        except BaseException as exc:
            rec.status = "failed"
            rec.error = f"{type(exc).__name__}: {exc}"
            rec.end_seq = seq.next()
            raise
        rec.end_seq = seq.next()
        stream.completed += 1


def run_rank_streams(pe, streams, records=None, seq=None, capture=False):
    """Execute this rank's streams concurrently; returns when all finish.

    With ``capture`` per-task failures (and aborted waits) land in
    ``records`` instead of propagating; the first fault still cancels the
    rest of the world through the scheduler.
    """
    records = records if records is not None else []
    seq = seq or _Seq()
    sched = pe.world.sched

    def guarded(stream):
        try:
            _exec_stream(pe, stream, records, seq)
            return None
        except BaseException as exc:
            sched.set_fault(exc if isinstance(exc, Exception) else RuntimeError(str(exc)))
            if capture:
                already = any(r.rank == pe.rank and r.stream == stream.name
                              and r.status != "ok" for r in records)
                if not already:
                    records.append(TaskRecord(pe.rank, stream.name, "<aborted>", "failed",
                                              f"{type(exc).__name__}: {exc}"))
                return None
            return exc

    if len(streams) == 1:
        exc = guarded(streams[0])
        if exc is not None:
            raise exc
        return records

    names = [f"r{pe.rank}/{s.name}" for s in streams]
    sched.stage(names)
    errors = []

    def body(i, stream):
        sched.register(names[i])
        try:
            exc = guarded(stream)
            if exc is not None:
                errors.append(exc)
        finally:
            sched.unregister()

    threads = [threading.Thread(target=body, args=(i, s), daemon=True,
                                name=f"rank{pe.rank}-{s.name}")
               for i, s in enumerate(streams)]
    # step out of the rotation while joining so the streams can use the token
    parent = sched.current_name()
    if parent is not None:
        sched.unregister()
    for t in threads:
        t.start()
    for t in threads:
        t.join(pe.world.spec.timeout_s * 8 + 30)
    if parent is not None:
        sched.register(parent)
    if errors and not capture:
        raise errors[0]
    return records


def launch(world, program, timeout=None):
    """Run every rank's streams to completion (or fault) and report.

    ``program`` maps rank -> list of Streams.  Any task fault is recorded
    with its rank/stream/task name; the first one cancels the world.
    """
    records = []
    seq = _Seq()

    def body(pe):
        run_rank_streams(pe, program.get(pe.rank, []), records, seq, capture=True)

    from .errors import CollectiveFault

    try:
        world.run(body, timeout=timeout)
    except CollectiveFault as fault:
        # stream-level detail is already in the records; keep launch-level
        # faults (e.g. deadlock) visible as synthetic records
        have = {(r.rank, r.status != "ok") for r in records}
        for rank, exc in fault.failures.items():
            if (rank, True) not in have:
                records.append(TaskRecord(rank, "<launch>", "<launch>", "failed",
                                          f"{type(exc).__name__}: {exc}"))
    return Report(records)
