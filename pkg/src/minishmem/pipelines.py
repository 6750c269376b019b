"""Signal-synchronized AllGather+GEMM and GEMM+ReduceScatter compositions.

The matmul is a plain tiled reference over numpy blocks; its job is to prove
that per-tile signaling plus a swizzle schedule yields bit-correct results
with no global barrier on the gather path.  One signal per source-rank chunk
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collectives import (
    SYNC_TOKEN,
    SYNC_WAIT,
    allgather_push_intra,
    rs_inter_finalize,
    rs_inter_streams,
    rs_intra_streams,
    _reset_own_signals,
)
from .core import SignalSet, SymHandle
from .errors import ArgumentError
from .primitives import SignalOp, WaitCond, consume_token
from .swizzle import TileSchedule
from .tasks import Stream, TaskRole, run_rank_streams


@dataclass(frozen=True)
class ProblemShape:
    """GEMM extent plus tiling; tile sizes only change how many block
    multiplies run, never the result."""

    m: int
    n: int
    k: int
    dtype: str = "int64"
    tile_m: int = 0  # 0: one tile per chunk
    tile_n: int = 0  # 0: full width

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ArgumentError("m, n, k must be >= 1")
        if self.tile_m < 0 or self.tile_n < 0:
            raise ArgumentError("tile sizes must be >= 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def dtype_bytes(self):
        return self.np_dtype.itemsize

    def rows_per_rank(self, world_size):
        if self.m % world_size:
            raise ArgumentError(f"M={self.m} not divisible by world {world_size}")
        return self.m // world_size


def _tiles(rows, cols, tile_m, tile_n):
    tm = tile_m or rows
    tn = tile_n or cols
    for r0 in range(0, rows, tm):
        for c0 in range(0, cols, tn):
            yield r0, min(r0 + tm, rows), c0, min(c0 + tn, cols)


def _chunk_visit_order(schedule: TileSchedule, world_size):
    """First-visit chunk order of a schedule; must cover every chunk."""
    seen = []
    for step in schedule.steps:
        if step.chunk not in seen:
            seen.append(step.chunk)
    if sorted(seen) != list(range(world_size)):
        raise ArgumentError(f"schedule covers chunks {sorted(seen)}, need 0..{world_size - 1}")
    return seen


@dataclass(frozen=True)
class AgGemmBuffers:
    gathered: SymHandle  # world_size stacked A shards
    ready: SignalSet     # one per source rank


def make_ag_gemm_buffers(world, shape: ProblemShape):
    rows = shape.rows_per_rank(world.world_size)
    chunk_bytes = rows * shape.k * shape.dtype_bytes
    return AgGemmBuffers(
        gathered=world.alloc_symmetric(world.world_size * chunk_bytes, align=8),
        ready=world.alloc_signals(world.world_size),
    )


def ag_gemm(pe, a_shard: np.ndarray, b: np.ndarray, shape: ProblemShape,
            schedule: TileSchedule, bufs: AgGemmBuffers, *,
            sync_style=SYNC_TOKEN, reset=True):
    """Compute C = concat(A_shards) x B on every rank.

    A communication stream pushes the local shard into every peer's slot and
    raises that peer's per-source signal; the compute stream visits chunks in
    schedule order, acquiring each remote chunk through wait/consume_token
    (or a plain conditional wait) -- never through a barrier.
    """
    world = pe.world.world_size
    rows = shape.rows_per_rank(world)
    dt = shape.np_dtype
    if a_shard.shape != (rows, shape.k) or a_shard.dtype != dt:
        raise ArgumentError(f"A shard must be ({rows}, {shape.k}) of {dt}")
    if b.shape != (shape.k, shape.n) or b.dtype != dt:
        raise ArgumentError(f"B must be ({shape.k}, {shape.n}) of {dt}")
    order = _chunk_visit_order(schedule, world)
    chunk_bytes = rows * shape.k * shape.dtype_bytes
    out = np.zeros((shape.m, shape.n), dtype=dt)

    comm = Stream(pe.rank, "comm", TaskRole.COMM_BLOCK)
    comm.enqueue(
        lambda pe: allgather_push_intra(pe, bufs.gathered, bufs.ready, a_shard,
                                        wait_all=False),
        "push_shard")

    compute = Stream(pe.rank, "compute", TaskRole.COMPUTE)

    def compute_task(pe):
        for chunk in order:
            if chunk == pe.rank:
                a_chunk = a_shard
            else:
                if sync_style == SYNC_TOKEN:
                    token = pe.wait(bufs.ready.at(chunk), 1)
                    raw = consume_token(
                        token,
                        pe.world.read_from(pe.rank, bufs.gathered,
                                           chunk * chunk_bytes, chunk_bytes))
                else:
                    pe.signal_wait_until(bufs.ready.at(chunk), WaitCond.EQ, 1)
                    raw = pe.world.read_from(pe.rank, bufs.gathered,
                                             chunk * chunk_bytes, chunk_bytes)
                a_chunk = np.frombuffer(raw, dtype=dt).reshape(rows, shape.k)
            base = chunk * rows
            for r0, r1, c0, c1 in _tiles(rows, shape.n, shape.tile_m, shape.tile_n):
                out[base + r0 : base + r1, c0:c1] = a_chunk[r0:r1] @ b[:, c0:c1]

    compute.enqueue(compute_task, "gemm", kind="compute")
    run_rank_streams(pe, [comm, compute])
    if reset:
        _reset_own_signals(pe, bufs.ready, world)
    return out


@dataclass(frozen=True)
class GemmRsBuffers:
    staging: SymHandle        # intra: world chunks / inter: node-local scatter slots
    partial: SymHandle | None  # inter only: one slot per node
    producer: SignalSet
    reduction: SignalSet


def make_gemm_rs_buffers(world, shape: ProblemShape):
    rows = shape.rows_per_rank(world.world_size)
    block_bytes = rows * shape.n * shape.dtype_bytes
    if world.n_nodes == 1:
        return GemmRsBuffers(
            staging=world.alloc_symmetric(world.world_size * block_bytes, align=8),
            partial=None,
            producer=world.alloc_signals(world.world_size),
            reduction=world.alloc_signals(world.world_size),
        )
    return GemmRsBuffers(
        staging=world.alloc_symmetric(world.local_world_size * block_bytes, align=8),
        partial=world.alloc_symmetric(world.n_nodes * block_bytes, align=8),
        producer=world.alloc_signals(world.world_size),
        reduction=world.alloc_signals(max(world.world_size, world.n_nodes)),
    )


def gemm_rs(pe, a: np.ndarray, b: np.ndarray, shape: ProblemShape,
            schedule: TileSchedule, bufs: GemmRsBuffers, *, reset=True,
            sync_style=SYNC_WAIT):
    """Rank k's output = row-block k of sum over ranks of (A_r x B).

    The producer stream emits row-blocks in schedule order and raises the
    per-chunk producer signal; the scatter/reduction streams consume them --
    single-node push-mode, or the staged cross-node pipeline when there is
    more than one node.
    """
    world = pe.world
    w = world.world_size
    rows = shape.rows_per_rank(w)
    dt = shape.np_dtype
    if a.shape != (shape.m, shape.k) or a.dtype != dt:
        raise ArgumentError(f"A must be ({shape.m}, {shape.k}) of {dt}")
    if b.shape != (shape.k, shape.n) or b.dtype != dt:
        raise ArgumentError(f"B must be ({shape.k}, {shape.n}) of {dt}")
    order = _chunk_visit_order(schedule, w)
    partial = np.zeros((shape.m, shape.n), dtype=dt)
    out = np.zeros((rows, shape.n), dtype=dt)

    producer = Stream(pe.rank, "producer", TaskRole.COMPUTE)

    def produce(pe):
        for chunk in order:
            base = chunk * rows
            for r0, r1, c0, c1 in _tiles(rows, shape.n, shape.tile_m, shape.tile_n):
                partial[base + r0 : base + r1, c0:c1] = a[base + r0 : base + r1] @ b[:, c0:c1]
            pe.signal_op(pe.rank, bufs.producer.at(chunk), SignalOp.SET, 1)

    producer.enqueue(produce, "gemm", kind="compute")

    if world.n_nodes == 1:
        rs = rs_intra_streams(pe, bufs.staging, bufs.producer, bufs.reduction,
                              partial.reshape(w, rows * shape.n), out.reshape(-1),
                              order=order, sync_style=sync_style)
        run_rank_streams(pe, [producer] + rs)
    else:
        # node visit order: first appearance in the chunk order; the rs
        # swizzle makes this identical across ranks of a node, which the
        # per-iteration intra-node barrier requires
        node_order = []
        for c in order:
            nd = c // world.local_world_size
            if nd not in node_order:
                node_order.append(nd)
        rs = rs_inter_streams(pe, partial, bufs.producer, bufs.reduction,
                              bufs.partial, bufs.staging, node_order=node_order)
        run_rank_streams(pe, [producer] + rs)
        rs_inter_finalize(pe, out, bufs.partial)
    if reset:
        _reset_own_signals(pe, bufs.producer, w)
        _reset_own_signals(pe, bufs.reduction, bufs.reduction.count)
    return out
