"""One-sided primitives bound to a rank: data movement, signal manipulation,
atomics, acquire/release accesses, node-scope broadcast/reduce, and the
wait/consume_token pair that ties a completed wait to subsequent reads.

Blocking transfers are applied before returning.  Non-blocking (``_nbi``)
transfers enter a per-rank pending queue; they become visible when the
scheduler's network actor applies them, or at ``quiet``/''barrier'' at the
latest.  ``fence`` orders pending transfers per destination rank without
forcing completion.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .core import LocalBuffer, SymHandle, U64_MASK
from .errors import ArgumentError, RangeError, UsageError

_U64 = struct.Struct("<Q")


class SignalOp(enum.Enum):
    SET = "set"
    ADD = "add"


class WaitCond(enum.Enum):
    EQ = "eq"
    NE = "ne"
    GE = "ge"
    GT = "gt"
    LE = "le"
    LT = "lt"

    def holds(self, observed, value):
        if self is WaitCond.EQ:
            return observed == value
        if self is WaitCond.NE:
            return observed != value
        if self is WaitCond.GE:
            return observed >= value
        if self is WaitCond.GT:
            return observed > value
        if self is WaitCond.LE:
            return observed <= value
        return observed < value


@dataclass
class Token:
    """Witness that a wait completed; single use."""

    sig: int
    observed: int
    _consumed: bool = False


def consume_token(token: Token, payload):
    """Tie ``payload`` reads to the wait that produced ``token``.

    At runtime the ordering contract is already satisfied when the wait
    returns; this enforces single use and returns the payload unchanged.
    """
    if not isinstance(token, Token):
        raise UsageError("consume_token needs a Token produced by wait()")
    if token._consumed:
        raise UsageError(f"token for signal {token.sig} consumed twice")
    token._consumed = True
    return payload


class Pe:
    """Per-rank view of the world: every primitive call site lives here."""

    def __init__(self, world, ctx):
        self.world = world
        self.ctx = ctx

    @property
    def rank(self):
        return self.ctx.rank

    @property
    def node_id(self):
        return self.ctx.node_id

    @property
    def local_rank(self):
        return self.ctx.local_rank

    def __repr__(self):
        return f"<pe {self.rank}/{self.world.world_size}>"

    # ------------------------------------------------------------------
    # identity

    def my_pe(self):
        self._bump("my_pe")
        return self.ctx.rank

    def n_pes(self):
        self._bump("n_pes")
        return self.world.world_size

    # ------------------------------------------------------------------
    # address translation and local buffers

    def remote_ptr(self, handle: SymHandle, peer):
        """Readable/writable view of ``peer``'s replica of ``handle``."""
        self._bump("remote_ptr")
        return self.world.heap_view(peer, handle)

    def local_view(self, handle: SymHandle, off=0, nbytes=None):
        return self.world.heap_view(self.rank, handle, off, nbytes)

    def make_local(self, nbytes) -> LocalBuffer:
        return LocalBuffer(self.rank, nbytes)

    # ------------------------------------------------------------------
    # puts and gets

    def putmem(self, dst, src, peer, *, nbytes=None, dst_off=0, src_off=0):
        payload = self._payload(src, src_off, nbytes)
        self._check_peer(peer)
        self._bump("putmem")
        self.world.trace_event(self.rank, "putmem", peer=peer, nbytes=len(payload),
                               dst=dst.offset + dst_off)
        self.world.copy_into(peer, dst, dst_off, payload)

    def putmem_nbi(self, dst, src, peer, *, nbytes=None, dst_off=0, src_off=0):
        payload = self._payload(src, src_off, nbytes)
        self._check_peer(peer)
        dst.check(dst_off, len(payload))
        self._bump("putmem_nbi")
        self.world.trace_event(self.rank, "putmem_nbi", peer=peer, nbytes=len(payload),
                               dst=dst.offset + dst_off)
        if not self.world.sched.controlled:
            self.world.copy_into(peer, dst, dst_off, payload)
            return
        w = self.world
        w.enqueue_op(self.rank, peer,
                     lambda: w.copy_into(peer, dst, dst_off, payload, chunked=False),
                     "putmem_nbi")

    def getmem(self, dst, src, peer, *, nbytes=None, dst_off=0, src_off=0):
        self._check_peer(peer)
        n = self._get_len(dst, src, nbytes, dst_off, src_off)
        self._bump("getmem")
        data = self.world.read_from(peer, src, src_off, n)
        self._store_local(dst, dst_off, data)

    def getmem_nbi(self, dst, src, peer, *, nbytes=None, dst_off=0, src_off=0):
        self._check_peer(peer)
        n = self._get_len(dst, src, nbytes, dst_off, src_off)
        self._bump("getmem_nbi")
        if not self.world.sched.controlled:
            self._store_local(dst, dst_off, self.world.read_from(peer, src, src_off, n))
            return
        w = self.world

        def apply():
            self._store_local(dst, dst_off, w.read_from(peer, src, src_off, n))

        w.enqueue_op(self.rank, peer, apply, "getmem_nbi")

    def putmem_signal(self, dst, src, sig, value, peer, *, op=SignalOp.SET,
                      nbytes=None, dst_off=0, src_off=0):
        """Put then update the destination signal; the signal update is never
        observable before the payload bytes."""
        payload = self._payload(src, src_off, nbytes)
        self._check_peer(peer)
        self._bump("putmem_signal")
        self.world.trace_event(self.rank, "putmem_signal", peer=peer, nbytes=len(payload),
                               dst=dst.offset + dst_off, sig=sig, value=value)
        self.world.copy_into(peer, dst, dst_off, payload)
        self._apply_signal(peer, sig, op, value)

    def putmem_signal_nbi(self, dst, src, sig, value, peer, *, op=SignalOp.SET,
                          nbytes=None, dst_off=0, src_off=0):
        payload = self._payload(src, src_off, nbytes)
        self._check_peer(peer)
        dst.check(dst_off, len(payload))
        self._check_sig(sig)
        self._bump("putmem_signal_nbi")
        self.world.trace_event(self.rank, "putmem_signal_nbi", peer=peer, nbytes=len(payload),
                               dst=dst.offset + dst_off, sig=sig, value=value)
        if not self.world.sched.controlled:
            self.world.copy_into(peer, dst, dst_off, payload)
            self._apply_signal(peer, sig, op, value)
            return
        w = self.world

        def apply():
            w.copy_into(peer, dst, dst_off, payload, chunked=False)
            self._apply_signal(peer, sig, op, value)

        w.enqueue_op(self.rank, peer, apply, "putmem_signal_nbi")

    def int_p(self, peer, handle: SymHandle, value, off=0):
        """Atomic single-word remote store."""
        self._check_peer(peer)
        handle.check(off, 8)
        self._bump("int_p")
        view = self.world.heap_view(peer, handle, off, 8)
        _U64.pack_into(view, 0, value & U64_MASK)

    def int_read(self, handle: SymHandle, off=0):
        return _U64.unpack_from(self.local_view(handle, off, 8), 0)[0]

    # ------------------------------------------------------------------
    # signals

    def signal_op(self, peer, sig, op, value):
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("signal_op")
        self.world.trace_event(self.rank, "signal_op", peer=peer, sig=sig, value=value)
        self._apply_signal(peer, sig, op, value)

    def notify(self, peer, sig, value):
        """signal_op with SET semantics."""
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("notify")
        self._apply_signal(peer, sig, SignalOp.SET, value)

    def signal_read(self, sig, peer=None):
        return self.world.sig_read(self.rank if peer is None else peer, sig)

    def signal_wait_until(self, sig, cond: WaitCond, value, timeout=None):
        """Spin on a local signal until ``cond`` holds; returns the observed
        value that satisfied it (acquire ordering)."""
        self._check_sig(sig)
        self._bump("signal_wait_until")
        self.world.trace_event(self.rank, "signal_wait_until", sig=sig, value=value,
                               cond=cond.value)
        seen = 0

        def pred():
            nonlocal seen
            seen = self.world.sig_read(self.rank, sig)
            return cond.holds(seen, value)

        self.world.sched.wait_for(
            pred, what=f"signal {sig} {cond.value} {value} on rank {self.rank}",
            timeout=timeout)
        return seen

    def wait(self, sig, value, timeout=None) -> Token:
        """signal_wait_until(EQ) that yields a single-use Token."""
        self._bump("wait")
        observed = self.signal_wait_until(sig, WaitCond.EQ, value, timeout=timeout)
        return Token(sig, observed)

    # ------------------------------------------------------------------
    # atomics and ordered accesses

    def atomic_cas(self, peer, sig, expected, desired):
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("atomic_cas")
        return self.world.sig_cas(peer, sig, expected, desired)

    def atomic_add(self, peer, sig, delta):
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("atomic_add")
        return self.world.sig_add(peer, sig, delta)

    def ld_acquire(self, peer, sig):
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("ld_acquire")
        return self.world.sig_read(peer, sig)

    def red_release(self, peer, sig, delta):
        """Publish all prior writes of the caller, then add to the signal."""
        self._check_peer(peer)
        self._check_sig(sig)
        self._bump("red_release")
        self.world.quiet_rank(self.rank)
        self.world.sig_add(peer, sig, delta)

    # ------------------------------------------------------------------
    # node-scope multimem

    def multimem_st(self, handle: SymHandle, off=0, nbytes=None):
        """Replicate the caller's bytes at ``handle`` into every same-node
        rank's replica (including its own)."""
        n = handle.length - off if nbytes is None else nbytes
        handle.check(off, n)
        self._bump("multimem_st")
        self.world.trace_event(self.rank, "multimem_st", nbytes=n, dst=handle.offset + off)
        payload = self.world.read_from(self.rank, handle, off, n)
        for peer in self.world.node_ranks(self.node_id):
            if peer == self.rank:
                continue
            self.world.copy_into(peer, handle, off, payload)

    def multimem_ld_reduce(self, handle: SymHandle, dtype, off=0, nbytes=None):
        """Element-wise sum of all same-node replicas, returned to the caller."""
        n = handle.length - off if nbytes is None else nbytes
        handle.check(off, n)
        dt = np.dtype(dtype)
        if n % dt.itemsize:
            raise ArgumentError(f"{n} bytes not a multiple of {dt.itemsize}-byte elements")
        self._bump("multimem_ld_reduce")
        out = np.zeros(n // dt.itemsize, dtype=dt)
        for peer in self.world.node_ranks(self.node_id):
            out += np.frombuffer(self.world.read_from(peer, handle, off, n), dtype=dt)
        return out

    # ------------------------------------------------------------------
    # world-level synchronization

    def broadcast(self, root, handle: SymHandle, nbytes=None, off=0, timeout=None):
        """Collective: every rank's replica ends up equal to root's bytes.

        Realized as a loop of puts from the root plus a completion barrier.
        """
        self._check_peer(root)
        n = handle.length - off if nbytes is None else nbytes
        handle.check(off, n)
        self._bump("broadcast")
        self.world.agree_broadcast_root(self.rank, root, timeout=timeout)
        if self.rank == root:
            payload = self.world.read_from(self.rank, handle, off, n)
            for peer in range(self.world.world_size):
                if peer != root:
                    self.world.copy_into(peer, handle, off, payload)
        self.barrier_all(timeout=timeout)

    def barrier_all(self, timeout=None):
        """Rendezvous with completion: pending transfers of every participant
        are visible to all participants after return."""
        self._bump("barrier_all")
        self.world.quiet_rank(self.rank)
        self.world.barrier_wait(self.rank, timeout=timeout)

    def sync_all(self, timeout=None):
        """Control-flow rendezvous only; non-blocking puts may still be in
        flight afterwards."""
        self._bump("sync_all")
        self.world.barrier_wait(self.rank, timeout=timeout)

    def barrier_all_intra_node(self, timeout=None):
        self._bump("barrier_all_intra_node")
        self.world.quiet_rank(self.rank)
        self.world.node_barrier_wait(self.ctx, timeout=timeout)

    def quiet(self):
        """Complete all non-blocking transfers issued by this rank."""
        self._bump("quiet")
        self.world.quiet_rank(self.rank)

    def fence(self):
        """Order pending transfers per destination: transfers issued before
        the fence are delivered before ones issued after it."""
        self._bump("fence")
        self.world.fence_rank(self.rank)

    # ------------------------------------------------------------------
    # helpers

    def _bump(self, name):
        self.world.bump(self.rank, name)

    def checkpoint(self):
        self.world.sched.checkpoint()

    def _check_peer(self, peer):
        if not 0 <= peer < self.world.world_size:
            raise ArgumentError(f"peer {peer} out of range (world {self.world.world_size})")

    def _check_sig(self, sig):
        if not 0 <= sig < self.world.spec.signal_count:
            raise ArgumentError(f"signal {sig} out of pad of {self.world.spec.signal_count}")

    def _apply_signal(self, peer, sig, op, value):
        if op is SignalOp.SET:
            self.world.sig_set(peer, sig, value)
        elif op is SignalOp.ADD:
            self.world.sig_add(peer, sig, value)
        else:
            raise ArgumentError(f"unknown signal op {op!r}")

    def _payload(self, src, src_off, nbytes):
        """Snapshot the source bytes at issue time."""
        if isinstance(src, LocalBuffer):
            if src.owner != self.rank:
                raise UsageError(
                    f"rank {self.rank} touched a local buffer owned by rank {src.owner}")
            raw = src.data
        elif isinstance(src, SymHandle):
            n = src.length - src_off if nbytes is None else nbytes
            src.check(src_off, n)
            return self.world.read_from(self.rank, src, src_off, n)
        else:
            raw = memoryview(src).cast("B")
        n = len(raw) - src_off if nbytes is None else nbytes
        if src_off < 0 or n < 0 or src_off + n > len(raw):
            raise RangeError(f"source range [{src_off}, {src_off + n}) outside {len(raw)} bytes")
        return bytes(raw[src_off : src_off + n])

    def _get_len(self, dst, src, nbytes, dst_off, src_off):
        if nbytes is not None:
            n = nbytes
        elif isinstance(dst, (LocalBuffer, bytearray)):
            n = len(dst if isinstance(dst, bytearray) else dst.data) - dst_off
        elif isinstance(dst, SymHandle):
            n = dst.length - dst_off
        else:
            n = len(memoryview(dst)) - dst_off
        src.check(src_off, n)
        return n

    def _store_local(self, dst, dst_off, data):
        if isinstance(dst, LocalBuffer):
            if dst.owner != self.rank:
                raise UsageError(
                    f"rank {self.rank} touched a local buffer owned by rank {dst.owner}")
            if dst_off + len(data) > len(dst.data):
                raise RangeError("get overflows destination buffer")
            dst.data[dst_off : dst_off + len(data)] = data
        elif isinstance(dst, SymHandle):
            self.world.copy_into(self.rank, dst, dst_off, data)
        else:
            view = memoryview(dst).cast("B")
            if dst_off + len(data) > len(view):
                raise RangeError("get overflows destination buffer")
            view[dst_off : dst_off + len(data)] = data
