"""Tile visit-order generators.

A schedule reorders the chunks a rank processes so computation consumes data
in the order communication can deliver it.  Three topologies are covered:

* switch-connected nodes, where one peer at a time already saturates a link,
  so each rank walks a ring starting from its own chunk;
* full-mesh nodes, where per-link bandwidth is low and every step must pull
  a sub-chunk from all peers at once;
* cross-node reduce-scatter, where each rank starts from the chunk needed by
  its counterpart's successor on the other node and keeps its own chunk last
  within its own node block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import ArgumentError


@dataclass(frozen=True)
class TileStep:
    chunk: int
    peers: tuple
    subchunk: int | None = None


@dataclass
class TileSchedule:
    rank: int
    steps: list = field(default_factory=list)

    def chunk_order(self):
        return [s.chunk for s in self.steps]

    def visits(self):
        """All (chunk, subchunk) pairs in visit order."""
        return [(s.chunk, s.subchunk) for s in self.steps]

    def round_peers(self):
        """Peer union per sub-chunk round; for un-subchunked schedules each
        step is its own round."""
        rounds = {}
        order = []
        for i, s in enumerate(self.steps):
            key = s.subchunk if s.subchunk is not None else ("step", i)
            if key not in rounds:
                rounds[key] = set()
                order.append(key)
            rounds[key].update(s.peers)
        return [(k, rounds[k]) for k in order]

    def to_json(self):
        doc = {"rank": self.rank, "steps": []}
        for s in self.steps:
            step = {"chunk": s.chunk, "peers": list(s.peers)}
            if s.subchunk is not None:
                step["subchunk"] = s.subchunk
            doc["steps"].append(step)
        return json.dumps(doc)


def ag_order_switch(rank, world_size):
    """Ring order for switch-connected ranks: start with the local chunk,
    then pull chunk (rank+k) mod world from its owner.  At every step k the
    pull targets across ranks form a permutation, so no link is shared."""
    if world_size < 1:
        raise ArgumentError("world_size must be >= 1")
    if not 0 <= rank < world_size:
        raise ArgumentError(f"rank {rank} out of world {world_size}")
    steps = []
    for k in range(world_size):
        chunk = (rank + k) % world_size
        peers = () if k == 0 else (chunk,)
        steps.append(TileStep(chunk, peers))
    return TileSchedule(rank, steps)


def ag_order_fullmesh(rank, world_size, subchunks):
    """Full-mesh order: step s takes sub-chunk s of every rank, pulling from
    all peers at once so every outgoing link carries traffic."""
    if world_size < 1:
        raise ArgumentError("world_size must be >= 1")
    if subchunks < 1:
        raise ArgumentError("subchunks must be >= 1")
    if not 0 <= rank < world_size:
        raise ArgumentError(f"rank {rank} out of world {world_size}")
    others = tuple(r for r in range(world_size) if r != rank)
    steps = []
    for s in range(subchunks):
        steps.append(TileStep(rank, (), subchunk=s))
        for peer in others:
            steps.append(TileStep(peer, (peer,), subchunk=s))
    return TileSchedule(rank, steps)


def rs_inter_order(ctx, n_nodes, local_world):
    """Reduce-scatter order across nodes: visit peer-node blocks first
    (node_id+1, node_id+2, ...), own node last; within every block start at
    local_rank+1 so the caller's own chunk lands at the tail of its block."""
    if n_nodes < 1 or local_world < 1:
        raise ArgumentError("n_nodes and local_world must be >= 1")
    if ctx.node_id >= n_nodes or ctx.local_rank >= local_world:
        raise ArgumentError(f"rank ctx {ctx} outside {n_nodes}x{local_world}")
    steps = []
    world = n_nodes * local_world
    for dn in range(1, n_nodes + 1):
        node = (ctx.node_id + dn) % n_nodes
        for dl in range(1, local_world + 1):
            lr = (ctx.local_rank + dl) % local_world
            chunk = node * local_world + lr
            peers = () if chunk == ctx.rank else (chunk,)
            steps.append(TileStep(chunk, peers))
    assert len(steps) == world
    return TileSchedule(ctx.rank, steps)
