"""Low-latency slot codec.

Every 4-byte payload word travels inside one 8-byte slot next to a 4-byte
flag, and slots are written and read only as single 8-byte units, which the
in-process heap keeps atomic.  Receivers spin on the flag instead of on a
signal, so a transfer completes with no barrier or quiet on the receive path,
at the cost of doubling the message size.

Slot layout (bit-exact, decodable from raw traces): little-endian payload
word in the low 4 bytes, little-endian flag in the high 4 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import SymHandle
from .errors import ArgumentError

SLOT_BYTES = 8
WORD_BYTES = 4

_SLOT = struct.Struct("<II")


def round_flag(iteration):
    """Flag for a given round: monotone, never zero, so stale zeroed buffers
    can never satisfy a receiver."""
    if iteration < 0:
        raise ArgumentError("iteration must be >= 0")
    return (iteration % 0xFFFFFFFF) + 1


def ll_encode(payload: bytes, flag) -> bytes:
    """Pure codec: interleave payload words with the flag."""
    if len(payload) % WORD_BYTES:
        raise ArgumentError(f"payload length {len(payload)} not a multiple of 4")
    words = np.frombuffer(payload, dtype="<u4")
    out = np.empty(2 * len(words), dtype="<u4")
    out[0::2] = words
    out[1::2] = flag
    return out.tobytes()


def ll_decode(encoded: bytes, flag) -> bytes | None:
    """Pure codec inverse; None if any slot carries the wrong flag."""
    if len(encoded) % SLOT_BYTES:
        raise ArgumentError(f"encoded length {len(encoded)} not a multiple of 8")
    arr = np.frombuffer(encoded, dtype="<u4")
    if not (arr[1::2] == flag).all():
        return None
    return arr[0::2].tobytes()


@dataclass(frozen=True)
class LLSlot:
    """One 8-byte unit: payload word in the low half, flag in the high half."""

    payload: int
    flag: int

    def to_bytes(self):
        return _SLOT.pack(self.payload, self.flag)

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) != SLOT_BYTES:
            raise ArgumentError(f"a slot is exactly {SLOT_BYTES} bytes")
        return cls(*_SLOT.unpack(raw))


@dataclass(frozen=True)
class LLBuffer:
    """A symmetric region sized exactly twice the payload it carries."""

    handle: SymHandle
    payload_bytes: int

    def __post_init__(self):
        if self.payload_bytes % WORD_BYTES:
            raise ArgumentError(f"payload size {self.payload_bytes} not a multiple of 4")
        if self.handle.length != 2 * self.payload_bytes:
            raise ArgumentError(
                f"LL buffer is {self.handle.length} bytes, payload {self.payload_bytes} "
                "requires exactly twice that")


def ll_pack(pe, dst: SymHandle, dst_off, payload, flag):
    """Encode ``payload`` into the caller's replica of ``dst``, one 8-byte
    store per slot."""
    payload = bytes(payload)
    if len(payload) % WORD_BYTES:
        raise ArgumentError(f"payload length {len(payload)} not a multiple of 4")
    nslots = len(payload) // WORD_BYTES
    dst.check(dst_off, nslots * SLOT_BYTES)
    pe._bump("ll_pack")
    view = pe.world.heap_view(pe.rank, dst, dst_off, nslots * SLOT_BYTES)
    for i in range(nslots):
        (word,) = struct.unpack_from("<I", payload, i * WORD_BYTES)
        _SLOT.pack_into(view, i * SLOT_BYTES, word, flag)
        if pe.world.sched.controlled and i + 1 < nslots:
            pe.checkpoint()


def _spin_slots(pe, src: SymHandle, src_off, payload_nbytes, flag, timeout):
    """Wait until every slot of the region carries ``flag``; returns a
    consistent snapshot of the encoded region."""
    nslots = payload_nbytes // WORD_BYTES
    total = nslots * SLOT_BYTES
    src.check(src_off, total)
    world = pe.world

    def arrived():
        raw = world.read_from(pe.rank, src, src_off, total)
        arr = np.frombuffer(raw, dtype="<u4")
        if (arr[1::2] == flag).all():
            return raw
        return None

    snap = arrived()
    if snap is not None:
        return snap
    # slow path: spin per slot so a cooperative scheduler can interleave
    for i in range(nslots):
        world.sched.wait_for(
            lambda i=i: _SLOT.unpack_from(
                world.heap_view(pe.rank, src, src_off + i * SLOT_BYTES, SLOT_BYTES), 0)[1] == flag,
            what=f"LL flag {flag} in slot {i} on rank {pe.rank}",
            timeout=timeout,
        )
    return arrived() or world.read_from(pe.rank, src, src_off, total)


def recv_ll_unpack(pe, dst, src: SymHandle, payload_nbytes, flag, *,
                   dst_off=0, src_off=0, timeout=None):
    """Spin until the region's flags match, then strip them and write the
    payload words to ``dst`` (a SymHandle into our own replica, a LocalBuffer,
    or any writable buffer)."""
    if payload_nbytes % WORD_BYTES:
        raise ArgumentError(f"payload length {payload_nbytes} not a multiple of 4")
    pe._bump("recv_ll_unpack")
    snap = _spin_slots(pe, src, src_off, payload_nbytes, flag, timeout)
    payload = np.frombuffer(snap, dtype="<u4")[0::2].tobytes()
    pe._store_local(dst, dst_off, payload)
    return payload


def recv_ll_pack(pe, dst: SymHandle, src: SymHandle, payload_nbytes, flag, *,
                 dst_off=0, src_off=0, timeout=None):
    """Spin like recv_ll_unpack but keep whole slots so the region can be
    forwarded as-is (flags included)."""
    if payload_nbytes % WORD_BYTES:
        raise ArgumentError(f"payload length {payload_nbytes} not a multiple of 4")
    pe._bump("recv_ll_pack")
    snap = _spin_slots(pe, src, src_off, payload_nbytes, flag, timeout)
    same_place = dst == src and dst_off == src_off
    if not same_place:
        pe.world.copy_into(pe.rank, dst, dst_off, snap)
    return snap
