"""Distributed tuning harness.

The target is a whole rank-collective function (communication, compute and
launch logic together); it runs once per measurement iteration, with every
signal word reset and verified zero first, because re-running just the inner
kernel would break its synchronization assumptions.  Per-config scores
aggregate as max-over-ranks of the per-rank median, optimizing the straggler;
the argmin (ties: first in enumeration order) is decided on rank 0 and
broadcast through the runtime's own primitives so every rank returns the
same configuration.
"""

from __future__ import annotations

import itertools
import json
import statistics
import time
from dataclasses import dataclass, field

from .errors import CollectiveFault, ConfigurationError, ShmemError, UsageError


class TuningError(ShmemError):
    """No valid configuration survived profiling (or the space was empty)."""


@dataclass(frozen=True)
class ConfigSpace:
    """Named axes with finite ordered values; enumeration is lexicographic
    over axes in declaration order."""

    axes: dict

    def __post_init__(self):
        if not self.axes:
            raise TuningError("empty configuration space")
        for name, values in self.axes.items():
            if not values:
                raise TuningError(f"axis {name!r} has no values")

    def configs(self):
        names = list(self.axes)
        return [dict(zip(names, combo))
                for combo in itertools.product(*(self.axes[n] for n in names))]

    def size(self):
        out = 1
        for values in self.axes.values():
            out *= len(values)
        return out


@dataclass
class TuneReport:
    axes: dict
    configs: list
    timings_us: list          # [config][rank][iteration], None for invalid configs
    scores: list              # max-over-ranks of per-rank median, None if invalid
    chosen_index: int
    chosen_config: dict
    per_rank_chosen: list     # agreement proof: every entry must be identical
    invalid: dict = field(default_factory=dict)

    def to_json(self, indent=None):
        doc = {
            "axes": self.axes,
            "configs": self.configs,
            "timings_us": self.timings_us,
            "scores": self.scores,
            "chosen_index": self.chosen_index,
            "chosen_config": self.chosen_config,
            "per_rank_chosen": self.per_rank_chosen,
            "invalid": {str(k): v for k, v in self.invalid.items()},
        }
        return json.dumps(doc, indent=indent, sort_keys=True)


def reset_signals(world):
    """Zero every signal word on every rank and verify with a sweep read.

    Refuses to run while non-blocking transfers are still in flight: a reset
    under a live collective would corrupt its synchronization state.
    """
    pending = world.pending_count()
    if pending:
        raise UsageError(f"cannot reset signals with {pending} transfers in flight")
    world.zero_all_signals()
    hot = world.sweep_signals()
    if hot:
        raise UsageError(f"signals still hot after reset: {hot}")


def tune(world, target, space: ConfigSpace, iterations=3, measure=None,
         timeout=None) -> TuneReport:
    """Profile every configuration and select one globally unified winner.

    ``target(pe, config)`` is the rank-collective being tuned.  ``measure``
    optionally replaces wall-clock timing: called as ``measure(pe, config,
    iteration)`` after the target ran, returning microseconds (useful for
    deterministic and simulated profiling).  A target fault marks the config
    invalid and moves on; if nothing survives, TuningError.
    """
    configs = space.configs()
    nranks = world.world_size
    timings, invalid = [], {}

    def one_measurement(cfg, it):
        def body(pe):
            t0 = time.perf_counter()
            target(pe, cfg)
            elapsed_us = (time.perf_counter() - t0) * 1e6
            if measure is not None:
                return float(measure(pe, cfg, it))
            return elapsed_us

        return world.run(body, timeout=timeout)

    for ci, cfg in enumerate(configs):
        per_rank = [[] for _ in range(nranks)]
        try:
            for it in range(iterations):
                reset_signals(world)  # every profile starts from zeroed signals
                for rank, us in enumerate(one_measurement(cfg, it)):
                    per_rank[rank].append(us)
        except (CollectiveFault, ShmemError) as exc:
            detail = exc.first if isinstance(exc, CollectiveFault) else exc
            invalid[ci] = f"{type(detail).__name__}: {detail}"
            timings.append(None)
            world.recover()  # drop half-finished rendezvous/transfer state
            continue
        timings.append(per_rank)

    scores = []
    for ci in range(len(configs)):
        if timings[ci] is None:
            scores.append(None)
        else:
            scores.append(max(statistics.median(r) for r in timings[ci]))
    valid = [ci for ci in range(len(configs)) if scores[ci] is not None]
    if not valid:
        raise TuningError(f"all {len(configs)} configurations failed profiling")
    best = min(valid, key=lambda ci: (scores[ci], ci))

    # rank 0 decides; the choice travels through the runtime's own primitives
    slot = world.alloc_symmetric(8, align=8)
    per_rank_chosen = [None] * nranks

    def agree(pe):
        if pe.rank == 0:
            for peer in range(nranks):
                pe.int_p(peer, slot, best)
        pe.barrier_all()
        per_rank_chosen[pe.rank] = int(pe.int_read(slot))

    world.run(agree, timeout=timeout)
    if len(set(per_rank_chosen)) != 1:
        raise ConfigurationError(f"ranks disagree on the choice: {per_rank_chosen}")

    return TuneReport(
        axes=dict(space.axes),
        configs=configs,
        timings_us=timings,
        scores=scores,
        chosen_index=best,
        chosen_config=configs[best],
        per_rank_chosen=per_rank_chosen,
        invalid=invalid,
    )
