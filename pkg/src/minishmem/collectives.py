"""One-sided collectives built on primitives and streams.

Each function is a rank-collective: every rank calls it with consistent
arguments (normally via ``world.run``).  Signals used by a collective are
zeroed by their owning rank before returning, so back-to-back invocations
are safe as long as rounds are separated by a join or a tuner reset.

Synchronization styles: waits can run either as ``signal_wait_until(EQ)`` or
as ``wait`` + ``consume_token``; both must produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LocalBuffer, SignalSet, SymHandle
from .errors import ArgumentError, CapacityError, ConfigurationError
from .ll import LLBuffer, ll_pack, recv_ll_pack, recv_ll_unpack
from .primitives import SignalOp, WaitCond, consume_token
from .tasks import BlockAssignment, Stream, TaskRole, run_rank_streams

SYNC_WAIT = "wait_until"
SYNC_TOKEN = "token"


@dataclass(frozen=True)
class ChunkLayout:
    """Per-rank slot arithmetic of a symmetric buffer split into equal chunks."""

    world_size: int
    total_elems: int
    elem_bytes: int

    def __post_init__(self):
        if self.total_elems % self.world_size:
            raise ArgumentError(
                f"{self.total_elems} elements do not split into {self.world_size} chunks")

    @property
    def chunk_elems(self):
        return self.total_elems // self.world_size

    @property
    def chunk_bytes(self):
        return self.chunk_elems * self.elem_bytes

    @property
    def total_bytes(self):
        return self.total_elems * self.elem_bytes

    def span(self, chunk):
        if not 0 <= chunk < self.world_size:
            raise ArgumentError(f"chunk {chunk} out of {self.world_size}")
        return chunk * self.chunk_bytes, self.chunk_bytes


def _await(pe, sig, value, style, timeout=None):
    if style == SYNC_TOKEN:
        tok = pe.wait(sig, value, timeout=timeout)
        consume_token(tok, None)
    else:
        pe.signal_wait_until(sig, WaitCond.EQ, value, timeout=timeout)


def _reset_own_signals(pe, sigs: SignalSet, count):
    for i in range(count):
        pe.world.sig_set(pe.rank, sigs.at(i), 0)


def _as_bytes(buf):
    if isinstance(buf, LocalBuffer):
        return bytes(buf.data)
    if isinstance(buf, np.ndarray):
        return buf.tobytes()
    return bytes(buf)


# ----------------------------------------------------------------------
# intra-node AllGather

def allgather_push_intra(pe, dst: SymHandle, sigs: SignalSet, local, *,
                         wait_all=True, reset=True, sync_style=SYNC_WAIT):
    """Push-mode AllGather: the owner writes its chunk into every rank's slot
    and notifies the consumer's per-source signal; consumers proceed per slot
    with no barrier anywhere."""
    payload = _as_bytes(local)
    n = len(payload)
    world = pe.world.world_size
    if dst.length != world * n:
        raise ArgumentError(f"gather buffer is {dst.length} bytes, need {world * n}")
    if sigs.count < world:
        raise ArgumentError("need one signal per source rank")
    for peer in range(world):
        pe.putmem(dst, payload, peer, dst_off=pe.rank * n)
        pe.signal_op(peer, sigs.at(pe.rank), SignalOp.SET, 1)  # notify the consumer
    if wait_all:
        for src in range(world):
            _await(pe, sigs.at(src), 1, sync_style)
        if reset:
            _reset_own_signals(pe, sigs, world)


def allgather_pull_intra(pe, dst: SymHandle, sigs: SignalSet, local, *,
                         order=None, reset=True):
    """Pull-mode AllGather: publish the local chunk, make it visible with one
    barrier, then fetch remote chunks in a caller-controlled order."""
    payload = _as_bytes(local)
    n = len(payload)
    world = pe.world.world_size
    if dst.length != world * n:
        raise ArgumentError(f"gather buffer is {dst.length} bytes, need {world * n}")
    if sigs.count < world:
        raise ArgumentError("need one signal per source rank")
    pe.putmem(dst, payload, pe.rank, dst_off=pe.rank * n)
    pe.signal_op(pe.rank, sigs.at(pe.rank), SignalOp.SET, 1)
    pe.barrier_all()  # make the local copy visible to all the other ranks
    for src in order if order is not None else range(world):
        if src == pe.rank:
            continue
        pe.getmem(dst, dst, src, nbytes=n, dst_off=src * n, src_off=src * n)
        pe.signal_op(pe.rank, sigs.at(src), SignalOp.SET, 1)
    if reset:
        _reset_own_signals(pe, sigs, world)


# ----------------------------------------------------------------------
# intra-node ReduceScatter

def rs_intra_streams(pe, staging: SymHandle, producer_sigs: SignalSet,
                     reduce_sigs: SignalSet, local_vals: np.ndarray,
                     out: np.ndarray, *, order=None, sync_style=SYNC_WAIT):
    """Build the two parallel parts of push-mode ReduceScatter as streams
    (copy-engine scatter plus a reduction stream) without running them, so a
    producer stream can join the same launch."""
    world = pe.world.world_size
    if out.dtype != local_vals.dtype:
        raise ArgumentError(f"dtype mismatch: {local_vals.dtype} vs {out.dtype}")
    chunk = out.size
    if local_vals.size != world * chunk:
        raise ArgumentError(
            f"input holds {local_vals.size} elements, need {world}x{chunk}")
    if not local_vals.flags["C_CONTIGUOUS"]:
        raise ArgumentError("input must be C-contiguous (the scatter reads it in place)")
    chunk_bytes = chunk * out.dtype.itemsize
    if staging.length != world * chunk_bytes:
        raise ArgumentError(f"staging is {staging.length} bytes, need {world * chunk_bytes}")
    if producer_sigs.count < world or reduce_sigs.count < world:
        raise ArgumentError("need one producer and one reduction signal per rank")
    flat = local_vals.reshape(world, chunk)

    scatter = Stream(pe.rank, "scatter", TaskRole.COPY_ENGINE)
    reduce = Stream(pe.rank, "reduce", TaskRole.COMPUTE)

    def scatter_task(pe):
        for dest in order if order is not None else range(world):
            # wait for the producer to generate this chunk
            _await(pe, producer_sigs.at(dest), 1, sync_style)
            pe.putmem(staging, flat[dest].tobytes(), dest, dst_off=pe.rank * chunk_bytes)
            pe.signal_op(dest, reduce_sigs.at(pe.rank), SignalOp.SET, 1)

    def reduce_task(pe):
        acc = np.zeros(chunk, dtype=out.dtype)
        for src in range(world):  # fixed ascending order keeps floats reproducible
            _await(pe, reduce_sigs.at(src), 1, sync_style)
            piece = np.frombuffer(
                pe.world.read_from(pe.rank, staging, src * chunk_bytes, chunk_bytes),
                dtype=out.dtype)
            acc += piece
        out[:] = acc

    scatter.enqueue(scatter_task, "scatter")
    reduce.enqueue(reduce_task, "reduce", kind="compute")
    return [scatter, reduce]


def reducescatter_push_intra(pe, staging: SymHandle, producer_sigs: SignalSet,
                             reduce_sigs: SignalSet, local_vals: np.ndarray,
                             out: np.ndarray, *, order=None, reset=True,
                             sync_style=SYNC_WAIT):
    """Push-mode ReduceScatter in two parallel parts: a copy-engine stream
    scatters each finished chunk to its destination rank, a reduction stream
    accumulates arrivals in ascending source order.

    ``producer_sigs[c]`` must be set (to 1) once chunk ``c`` of
    ``local_vals`` is ready; pre-set them all when there is no producer.
    """
    streams = rs_intra_streams(pe, staging, producer_sigs, reduce_sigs, local_vals,
                               out, order=order, sync_style=sync_style)
    run_rank_streams(pe, streams)
    if reset:
        _reset_own_signals(pe, reduce_sigs, pe.world.world_size)
        _reset_own_signals(pe, producer_sigs, pe.world.world_size)


# ----------------------------------------------------------------------
# cross-node low-latency AllGather

BLOCK_SEND = "inter_send"
BLOCK_FORWARD = "inter_recv_forward"
BLOCK_UNPACK = "intra_recv"


def ll_block_assignment(ctx, world_spec) -> BlockAssignment:
    """Role of each of the WORLD_SIZE blocks: one sender, one forwarder per
    peer node, the rest unpack same-node broadcasts."""
    lws = world_spec.local_world_size
    roles = {}
    for block in range(world_spec.world_size):
        peer_node, peer_lr = divmod(block, lws)
        if peer_lr == ctx.local_rank:
            roles[block] = BLOCK_SEND if peer_node == ctx.node_id else BLOCK_FORWARD
        else:
            roles[block] = BLOCK_UNPACK
    return BlockAssignment(roles)


def allgather_ll_inter(pe, dst: SymHandle, llbuf: LLBuffer, producer_sigs,
                       bytes_per_rank, *, flag=1, timeout=None):
    """Low-latency cross-node AllGather.

    Precondition: the caller's own chunk sits in its slot of ``dst``.  One
    block packs it and fires non-blocking sends to its counterpart on every
    other node; each counterpart forwards arrivals node-wide with a multimem
    store; the remaining blocks spin on flags and unpack.  No barrier, no
    quiet, no signals anywhere on the path (``producer_sigs`` is accepted
    for interface parity and not consumed).
    """
    world = pe.world
    if world.n_nodes < 2:
        raise ConfigurationError("low-latency AllGather needs at least 2 nodes")
    b = bytes_per_rank
    if b % 4:
        raise ArgumentError(f"bytes_per_rank {b} not a multiple of 4")
    if llbuf.payload_bytes != world.world_size * b:
        raise ArgumentError(
            f"LL buffer carries {llbuf.payload_bytes} payload bytes, "
            f"need {world.world_size * b}")
    if dst.length != world.world_size * b:
        raise ArgumentError(f"gather buffer is {dst.length} bytes, need {world.world_size * b}")
    lws = world.local_world_size
    lh = llbuf.handle
    for block in range(world.world_size):
        peer_node, peer_lr = divmod(block, lws)
        if peer_lr == pe.local_rank:
            if peer_node != pe.node_id:
                # counterpart on node peer_node sent its chunk here over the wire
                seg = peer_node * lws + pe.local_rank
                recv_ll_pack(pe, lh, lh, b, flag,
                             dst_off=seg * 2 * b, src_off=seg * 2 * b, timeout=timeout)
                pe.multimem_st(lh, off=seg * 2 * b, nbytes=2 * b)
                recv_ll_unpack(pe, dst, lh, b, flag,
                               dst_off=seg * b, src_off=seg * 2 * b, timeout=timeout)
            else:
                seg = pe.rank
                ll_pack(pe, lh, seg * 2 * b,
                        world.read_from(pe.rank, dst, seg * b, b), flag)
                for node in range(world.n_nodes):
                    if node != pe.node_id:
                        peer = node * lws + pe.local_rank
                        pe.putmem_nbi(lh, lh, peer, nbytes=2 * b,
                                      dst_off=seg * 2 * b, src_off=seg * 2 * b)
                pe.multimem_st(lh, off=seg * 2 * b, nbytes=2 * b)
        else:
            seg = peer_node * lws + peer_lr
            recv_ll_unpack(pe, dst, lh, b, flag,
                           dst_off=seg * b, src_off=seg * 2 * b, timeout=timeout)


# ----------------------------------------------------------------------
# cross-node ReduceScatter

def rs_inter_streams(pe, local_mat: np.ndarray, producer_sigs: SignalSet,
                     comm_sigs: SignalSet, partial_buf: SymHandle,
                     scatter_buf: SymHandle, *, node_order=None):
    """Build the per-node-iteration stage structure of cross-node
    ReduceScatter: stream 0 scatters within the node and runs the intra-node
    barrier, stream 1 waits on stream 0, reduces the staging and sends the
    partial sum to the counterpart on the target node."""
    world = pe.world
    w, lws, nn = world.world_size, world.local_world_size, world.n_nodes
    m, n = local_mat.shape
    if m % w:
        raise ArgumentError(f"{m} rows do not split over {w} ranks")
    mpr = m // w
    dt = local_mat.dtype
    block_bytes = mpr * n * dt.itemsize
    if not local_mat.flags["C_CONTIGUOUS"]:
        raise ArgumentError("input must be C-contiguous (the scatter reads it in place)")
    if scatter_buf.length != lws * block_bytes:
        raise ArgumentError(f"scatter staging needs {lws * block_bytes} bytes")
    if partial_buf.length != nn * block_bytes:
        raise ArgumentError(f"partial staging needs {nn * block_bytes} bytes")
    if producer_sigs.count < w or comm_sigs.count < nn:
        raise ArgumentError("need one producer signal per rank and one comm signal per node")
    mat = local_mat.reshape(w, mpr, n)
    order = list(node_order) if node_order is not None else \
        [(pe.node_id + 1 + i) % nn for i in range(nn)]
    if sorted(order) != list(range(nn)):
        raise ArgumentError(f"node order {order} is not a permutation of nodes")

    s0 = Stream(pe.rank, "stream0", TaskRole.COPY_ENGINE)
    s1 = Stream(pe.rank, "stream1", TaskRole.COMM_BLOCK)

    def make_scatter(i, node):
        def scatter(pe):
            if i > 0:
                # staging reuse: wait until the whole node drained iteration i-1
                pe.signal_wait_until(comm_sigs.at(i - 1), WaitCond.GE, lws)
            for dl in range(1, lws + 1):
                lr = (pe.local_rank + dl) % lws  # own collector last
                dest = node * lws + lr           # row-block owner on the target node
                collector = pe.node_id * lws + lr
                pe.signal_wait_until(producer_sigs.at(dest), WaitCond.GE, 1)
                pe.putmem(scatter_buf, mat[dest].tobytes(), collector,
                          dst_off=pe.local_rank * block_bytes)
        return scatter

    def make_reduce_send(i, node):
        def reduce_send(pe):
            stage = np.frombuffer(
                pe.world.read_from(pe.rank, scatter_buf, 0, lws * block_bytes),
                dtype=dt).reshape(lws, mpr, n)
            acc = np.zeros((mpr, n), dtype=dt)
            for lr in range(lws):
                acc += stage[lr]
            target = node * lws + pe.local_rank  # counterpart on the target node
            pe.putmem(partial_buf, acc.tobytes(), target,
                      dst_off=pe.node_id * block_bytes)
            for lr in range(lws):
                pe.signal_op(pe.node_id * lws + lr, comm_sigs.at(i), SignalOp.ADD, 1)
        return reduce_send

    for i, node in enumerate(order):
        s0.enqueue(make_scatter(i, node), f"scatter[{node}]")
        s0.enqueue(lambda pe: pe.barrier_all_intra_node(), f"intra_barrier[{node}]")
        s1.wait(s0)
        s1.enqueue(make_reduce_send(i, node), f"reduce_send[{node}]")
    return [s0, s1]


def rs_inter_finalize(pe, out: np.ndarray, partial_buf: SymHandle):
    """Global barrier, then the second reduction over per-node partial sums."""
    nn = pe.world.n_nodes
    mpr, n = out.shape
    dt = out.dtype
    block_bytes = mpr * n * dt.itemsize
    pe.barrier_all()
    partials = np.frombuffer(
        pe.world.read_from(pe.rank, partial_buf, 0, nn * block_bytes),
        dtype=dt).reshape(nn, mpr, n)
    acc = np.zeros((mpr, n), dtype=dt)
    for node in range(nn):
        acc += partials[node]
    out[:] = acc


def reducescatter_inter(pe, local_mat: np.ndarray, producer_sigs: SignalSet,
                        comm_sigs: SignalSet, out: np.ndarray,
                        partial_buf: SymHandle, scatter_buf: SymHandle, *,
                        node_order=None, reset=True):
    """Cross-node ReduceScatter in three stages per target node: intra-node
    scatter on a copy-engine stream, then local reduction and one cross-node
    send on a second stream, then a final reduction after a global barrier.

    ``producer_sigs[g]`` is set when row-block ``g`` of ``local_mat`` is
    ready.  ``comm_sigs[i]`` counts same-node ranks done with iteration
    ``i``'s reduction; the next scatter waits for it so staging is never
    overwritten while still being read.
    """
    w = pe.world.world_size
    mpr = local_mat.shape[0] // w
    dt = local_mat.dtype
    if out.shape != (mpr, local_mat.shape[1]) or out.dtype != dt:
        raise ArgumentError(f"output must be ({mpr}, {local_mat.shape[1]}) of {dt}")
    streams = rs_inter_streams(pe, local_mat, producer_sigs, comm_sigs,
                               partial_buf, scatter_buf, node_order=node_order)
    run_rank_streams(pe, streams)
    rs_inter_finalize(pe, out, partial_buf)
    if reset:
        _reset_own_signals(pe, producer_sigs, w)
        _reset_own_signals(pe, comm_sigs, pe.world.n_nodes)


# ----------------------------------------------------------------------
# low-latency AllToAll (dispatch / combine)

@dataclass(frozen=True)
class ExpertRouting:
    """Per-token top-k expert choices; experts are owned contiguously."""

    topk_ids: np.ndarray  # (n_tokens, topk)
    experts_total: int

    def __post_init__(self):
        ids = self.topk_ids
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ArgumentError("topk_ids must be (n_tokens, topk>=1)")
        if ids.size and (ids.min() < 0 or ids.max() >= self.experts_total):
            raise ArgumentError("expert id out of range")

    @property
    def topk(self):
        return self.topk_ids.shape[1]

    def owner(self, expert, world_size):
        if self.experts_total % world_size:
            raise ArgumentError(
                f"{self.experts_total} experts do not split over {world_size} ranks")
        return int(expert) // (self.experts_total // world_size)


@dataclass(frozen=True)
class ReceivedToken:
    src_rank: int
    src_idx: int
    expert: int
    data: np.ndarray


_HEADER = 16  # src token index + expert id, int64 each


@dataclass(frozen=True)
class AllToAllBuffers:
    """Worst-case static staging: per source, room for every (token, expert)
    pair it could route here; no recycling queue."""

    disp_data: SymHandle
    disp_sigs: SignalSet
    comb_data: SymHandle
    comb_sigs: SignalSet
    cap_slots: int
    token_bytes: int

    @property
    def slot_bytes(self):
        return _HEADER + self.token_bytes


def make_alltoall_buffers(world, max_tokens, topk, token_bytes, cap_slots=None):
    cap = cap_slots if cap_slots is not None else max_tokens * topk
    slot = _HEADER + token_bytes
    return AllToAllBuffers(
        disp_data=world.alloc_symmetric(world.world_size * cap * slot, align=8),
        disp_sigs=world.alloc_signals(world.world_size),
        comb_data=world.alloc_symmetric(world.world_size * cap * slot, align=8),
        comb_sigs=world.alloc_signals(world.world_size),
        cap_slots=cap,
        token_bytes=token_bytes,
    )


def _pack_entries(entries, vecs, token_bytes):
    out = bytearray()
    for (idx, expert), vec in zip(entries, vecs):
        out += np.array([idx, expert], dtype="<i8").tobytes()
        raw = vec.tobytes()
        if len(raw) != token_bytes:
            raise ArgumentError(f"token payload is {len(raw)} bytes, expected {token_bytes}")
        out += raw
    return bytes(out)


def _unpack_entries(raw, count, token_bytes, dtype):
    slot = _HEADER + token_bytes
    out = []
    for i in range(count):
        base = i * slot
        idx, expert = np.frombuffer(raw, dtype="<i8", count=2, offset=base)
        vec = np.frombuffer(raw, dtype=dtype, count=token_bytes // np.dtype(dtype).itemsize,
                            offset=base + _HEADER).copy()
        out.append((int(idx), int(expert), vec))
    return out


def alltoall_dispatch(pe, tokens: np.ndarray, routing: ExpertRouting,
                      bufs: AllToAllBuffers, *, reset=True, timeout=None):
    """Send each token to every rank owning one of its top-k experts; one
    copy per (token, expert) pair.  Per-source counters travel as signals
    (count+1 so an empty sender is distinguishable from silence)."""
    world = pe.world.world_size
    n_tokens = tokens.shape[0]
    if routing.topk_ids.shape[0] != n_tokens:
        raise ArgumentError("routing and token counts differ")
    token_bytes = tokens[0].nbytes if n_tokens else bufs.token_bytes
    if token_bytes != bufs.token_bytes:
        raise ArgumentError(f"token is {token_bytes} bytes, buffers sized for {bufs.token_bytes}")
    slot = bufs.slot_bytes
    by_dest = [[] for _ in range(world)]
    for i in range(n_tokens):
        for e in routing.topk_ids[i]:
            by_dest[routing.owner(e, world)].append((i, int(e)))
    for dest in range(world):
        entries = by_dest[dest]
        if len(entries) > bufs.cap_slots:
            raise CapacityError(
                f"{len(entries)} tokens for rank {dest} exceed capacity {bufs.cap_slots}")
        payload = _pack_entries(entries, [tokens[i] for i, _ in entries], token_bytes)
        pe.putmem_signal(bufs.disp_data, payload, bufs.disp_sigs.at(pe.rank),
                         len(entries) + 1, dest,
                         dst_off=pe.rank * bufs.cap_slots * slot)
    received = []
    for src in range(world):
        seen = pe.signal_wait_until(bufs.disp_sigs.at(src), WaitCond.GE, 1, timeout=timeout)
        count = int(seen) - 1
        raw = pe.world.read_from(pe.rank, bufs.disp_data,
                                 src * bufs.cap_slots * slot, count * slot)
        for idx, expert, vec in _unpack_entries(raw, count, token_bytes, tokens.dtype):
            received.append(ReceivedToken(src, idx, expert, vec))
    if reset:
        _reset_own_signals(pe, bufs.disp_sigs, world)
    return received


def alltoall_combine(pe, outputs, n_tokens, token_elems, bufs: AllToAllBuffers, *,
                     dtype=np.int64, reset=True, timeout=None):
    """Return expert outputs to their source tokens and sum over top-k.

    ``outputs`` is a list of (ReceivedToken, out_vector); each contribution
    travels back to its source rank, which accumulates per token index in
    (owner rank, arrival slot) order.
    """
    world = pe.world.world_size
    slot = bufs.slot_bytes
    by_src = [[] for _ in range(world)]
    for rt, vec in outputs:
        by_src[rt.src_rank].append(((rt.src_idx, rt.expert), np.asarray(vec)))
    for src in range(world):
        pairs = by_src[src]
        if len(pairs) > bufs.cap_slots:
            raise CapacityError(
                f"{len(pairs)} outputs for rank {src} exceed capacity {bufs.cap_slots}")
        payload = _pack_entries([p[0] for p in pairs], [p[1] for p in pairs],
                                bufs.token_bytes)
        pe.putmem_signal(bufs.comb_data, payload, bufs.comb_sigs.at(pe.rank),
                         len(pairs) + 1, src,
                         dst_off=pe.rank * bufs.cap_slots * slot)
    acc = np.zeros((n_tokens, token_elems), dtype=dtype)
    contributions = np.zeros(n_tokens, dtype=np.int64)
    for owner in range(world):
        seen = pe.signal_wait_until(bufs.comb_sigs.at(owner), WaitCond.GE, 1, timeout=timeout)
        count = int(seen) - 1
        raw = pe.world.read_from(pe.rank, bufs.comb_data,
                                 owner * bufs.cap_slots * slot, count * slot)
        for idx, _expert, vec in _unpack_entries(raw, count, bufs.token_bytes, dtype):
            acc[idx] += vec
            contributions[idx] += 1
    if reset:
        _reset_own_signals(pe, bufs.comb_sigs, world)
    return acc, contributions
