"""Discrete-event timing of communication/computation schedules.

The transfer model is ``base_latency + bytes/bandwidth`` per link with
additive per-hop signal costs; there is no congestion modeling beyond link
exclusivity and explicit capacities.  That is enough to reproduce the
analytic numbers the runtime is tuned against:

* small-message AllGather across nodes: a loop-based baseline pays a worst
  case launch skew per stage plus a set/wait signal pair per transfer, while
  the flag-slot (LL) variant overlaps every wire transfer and replaces the
  intra-node dispatch with one hardware broadcast;
* cross-node ReduceScatter: with ``lw`` ranks per node and volume ``B`` GB
  per target block, the copy engine scatters for ``(lw-1)*B/nvlink_bw``
  seconds, the NIC send takes ``B/nic_bw``, and the local reduction (which
  reads ``lw`` partials and writes one) must fit in the difference -- giving
  a closed-form minimum reduction bandwidth for perfect overlap.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, asdict
from importlib import resources as importlib_resources

from .errors import ArgumentError, ConfigurationError, OverlapInfeasibleError

SWITCH = "switch"
FULLMESH = "fullmesh"
PCIE = "pcie"


@dataclass(frozen=True)
class Topology:
    """Link graph parameters; bandwidths in GB/s, latencies in microseconds."""

    intra_kind: str = SWITCH
    intra_link_bw_gbps: float = 200.0
    intra_base_latency_us: float = 0.5
    intra_aggregate_bw_gbps: float | None = None
    inter_nic_bw_gbps: float = 45.0
    inter_base_latency_us: float = 11.0
    copy_engines: int = 1

    def __post_init__(self):
        if self.intra_kind not in (SWITCH, FULLMESH, PCIE):
            raise ConfigurationError(f"unknown intra_kind {self.intra_kind!r}")
        if self.intra_link_bw_gbps <= 0 or self.inter_nic_bw_gbps <= 0:
            raise ConfigurationError("bandwidths must be > 0")
        if self.intra_base_latency_us < 0 or self.inter_base_latency_us < 0:
            raise ConfigurationError("latencies must be >= 0")
        if self.copy_engines < 1:
            raise ConfigurationError("need at least one copy engine")

    def validate_fullmesh(self, local_world):
        """Full-mesh aggregate must equal (local_world-1) per-link bandwidth."""
        if self.intra_kind != FULLMESH or self.intra_aggregate_bw_gbps is None:
            return
        want = (local_world - 1) * self.intra_link_bw_gbps
        if abs(self.intra_aggregate_bw_gbps - want) > 1e-6 * max(want, 1.0):
            raise ConfigurationError(
                f"full-mesh aggregate {self.intra_aggregate_bw_gbps} != "
                f"({local_world}-1) x {self.intra_link_bw_gbps}")


@dataclass(frozen=True)
class CostParams:
    """Calibrated event costs.  The H800 defaults: ~0.5 us for a small
    NVLink transfer, up to ~1.5 us once a launch loop skews the sends, ~1.5
    us for a node-wide multimem store, 170/45 GB/s effective NVLink/NIC
    bandwidth, ~2 us for a remote signal set plus the matching wait, ~11 us
    for a small cross-node RDMA message, and ~32 GB/s of reduction bandwidth
    per SM (so 15 SMs clear the overlap threshold)."""

    nvlink_small_msg_us: float = 0.5
    skew_worst_us: float = 1.5
    multimem_cost_us: float = 1.5
    nvlink_bw_gbps: float = 170.0
    nic_bw_gbps: float = 45.0
    signal_pair_cost_us: float = 2.0
    inter_small_msg_us: float = 11.0
    reduce_bw_per_sm_gbps: float = 32.0

    def __post_init__(self):
        for name, val in asdict(self).items():
            if val < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {val}")
        if self.nvlink_bw_gbps <= 0 or self.nic_bw_gbps <= 0:
            raise ConfigurationError("bandwidths must be > 0")


def load_params(source):
    """Load (Topology, CostParams) from a shipped profile name ("h800",
    "mi308x"), a path to a JSON document, or an already-parsed dict."""
    if isinstance(source, dict):
        doc = source
    else:
        text = None
        name = str(source)
        if "/" not in name and not name.endswith(".json"):
            ref = importlib_resources.files("minishmem").joinpath(f"params/{name}.json")
            if ref.is_file():
                text = ref.read_text()
        if text is None:
            with open(name) as f:
                text = f.read()
        doc = json.loads(text)
    try:
        topo = Topology(**doc.get("topology", {}))
        cost = CostParams(**doc.get("cost", {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameter document: {exc}") from exc
    return topo, cost


def transfer_time(nbytes, link, topology: Topology):
    """Microseconds for one transfer: base latency plus bytes over bandwidth."""
    if nbytes < 0:
        raise ArgumentError("negative transfer size")
    if link == "intra":
        base, bw = topology.intra_base_latency_us, topology.intra_link_bw_gbps
    elif link == "inter":
        base, bw = topology.inter_base_latency_us, topology.inter_nic_bw_gbps
    else:
        raise ArgumentError(f"unknown link {link!r}")
    # bytes / (GB/s) in microseconds: nbytes / (bw * 1e9) * 1e6
    return base + nbytes / (bw * 1000.0)


# ----------------------------------------------------------------------
# discrete-event engine


@dataclass
class SimEvent:
    name: str
    rank: int
    resource: str
    duration_us: float
    deps: tuple = ()
    units: int = 1


@dataclass
class TimelineEvent:
    name: str
    rank: int
    resource: str
    start_us: float
    duration_us: float
    deps: tuple = ()

    @property
    def end_us(self):
        return self.start_us + self.duration_us


@dataclass
class Timeline:
    events: list = field(default_factory=list)

    @property
    def makespan_us(self):
        return max((e.end_us for e in self.events), default=0.0)

    def by_name(self):
        return {e.name: e for e in self.events}

    def critical_path(self):
        """Event names from a root to the latest finisher, following the
        latest-ending dependency at each hop."""
        if not self.events:
            return []
        index = self.by_name()
        cur = max(self.events, key=lambda e: e.end_us)
        path = [cur.name]
        while cur.deps:
            dep_events = [index[d] for d in cur.deps if d in index]
            if not dep_events:
                break
            cur = max(dep_events, key=lambda e: e.end_us)
            path.append(cur.name)
        return list(reversed(path))

    def to_chrome_trace(self):
        return [
            {"name": e.name, "ph": "X", "ts": e.start_us, "dur": e.duration_us,
             "pid": e.rank, "tid": e.resource}
            for e in self.events
        ]


def simulate(events, capacities=None):
    """Greedy list scheduling: an event starts once its dependencies finished
    and its resource has free units; ties break by submission order."""
    capacities = dict(capacities or {})
    by_name = {}
    for ev in events:
        if ev.name in by_name:
            raise ArgumentError(f"duplicate event name {ev.name!r}")
        by_name[ev.name] = ev
        cap = capacities.setdefault(ev.resource, 1)
        if ev.units > cap:
            raise ConfigurationError(
                f"event {ev.name} needs {ev.units} units of {ev.resource} (cap {cap})")
        for d in ev.deps:
            if d not in by_name and d not in {e.name for e in events}:
                raise ArgumentError(f"event {ev.name} depends on unknown {d!r}")

    in_use = {r: 0 for r in capacities}
    done_at = {}
    pending = list(events)
    running = []  # (end, seq, event)
    placed = []
    now = 0.0
    seq = 0
    while pending or running:
        progressed = True
        while progressed:
            progressed = False
            for ev in list(pending):
                if any(d not in done_at or done_at[d] > now for d in ev.deps):
                    continue
                if in_use[ev.resource] + ev.units > capacities[ev.resource]:
                    continue
                start = max([now] + [done_at[d] for d in ev.deps])
                in_use[ev.resource] += ev.units
                heapq.heappush(running, (start + ev.duration_us, seq, ev))
                seq += 1
                placed.append(TimelineEvent(ev.name, ev.rank, ev.resource,
                                            start, ev.duration_us, tuple(ev.deps)))
                pending.remove(ev)
                progressed = True
        if not running:
            if pending:
                raise ArgumentError("dependency cycle among simulated events")
            break
        end, _, ev = heapq.heappop(running)
        now = max(now, end)
        in_use[ev.resource] -= ev.units
        done_at[ev.name] = end
        # release everything finishing at the same instant
        while running and running[0][0] <= now:
            end2, _, ev2 = heapq.heappop(running)
            in_use[ev2.resource] -= ev2.units
            done_at[ev2.name] = end2
    return Timeline(placed)


# ----------------------------------------------------------------------
# AllGather latency models

def simulate_ag_baseline(params: CostParams, n_nodes, local_world):
    """Loop-based small-message AllGather: per rank, an intra-node dispatch
    of the local chunk, a skewed send loop to every other node, then a
    skewed forward of each received node chunk -- every hop paying a
    set/wait signal pair."""
    if n_nodes < 1 or local_world < 1:
        raise ArgumentError("need at least one node and one rank per node")
    events = []
    world = n_nodes * local_world
    for r in range(world):
        copy_res = f"rank{r}/copy"
        link_res = f"rank{r}/link"
        events.append(SimEvent(f"r{r}/intra_dispatch", r, copy_res, params.skew_worst_us))
        events.append(SimEvent(f"r{r}/intra_signal", r, link_res,
                               params.signal_pair_cost_us, deps=(f"r{r}/intra_dispatch",)))
        if n_nodes == 1:
            continue
        events.append(SimEvent(f"r{r}/inter_launch", r, f"rank{r}/sm",
                               params.skew_worst_us, deps=(f"r{r}/intra_signal",)))
        events.append(SimEvent(f"r{r}/inter_wire", r, f"rank{r}/nic",
                               params.inter_small_msg_us, deps=(f"r{r}/inter_launch",)))
        events.append(SimEvent(f"r{r}/inter_signal", r, f"rank{r}/nic",
                               params.signal_pair_cost_us, deps=(f"r{r}/inter_wire",)))
        events.append(SimEvent(f"r{r}/forward", r, copy_res,
                               params.skew_worst_us, deps=(f"r{r}/inter_signal",)))
        prev = f"r{r}/forward"
        for k in range(n_nodes - 1):
            name = f"r{r}/forward_signal{k}"
            events.append(SimEvent(name, r, link_res,
                                   params.signal_pair_cost_us, deps=(prev,)))
            prev = name
    return simulate(events)


def simulate_ag_ll(params: CostParams, n_nodes, local_world):
    """Flag-slot AllGather: one block packs and fires concurrent non-blocking
    sends to its counterpart on every peer node; counterparts forward each
    arrival node-wide with one multimem store; all other blocks spin on flags
    and unpack.  No signal pairs anywhere."""
    if n_nodes < 1 or local_world < 1:
        raise ArgumentError("need at least one node and one rank per node")
    events = []
    world = n_nodes * local_world

    def rank_of(node, lr):
        return node * local_world + lr

    for r in range(world):
        events.append(SimEvent(f"r{r}/pack", r, f"rank{r}/sm", params.nvlink_small_msg_us))
        events.append(SimEvent(f"r{r}/mm_own", r, f"rank{r}/mm_own",
                               params.multimem_cost_us, deps=(f"r{r}/pack",)))
    for r in range(world):
        node, lr = divmod(r, local_world)
        for pn in range(n_nodes):
            if pn == node:
                continue
            peer = rank_of(pn, lr)
            events.append(SimEvent(f"r{r}/wire_to{pn}", r, f"rank{r}/nic{pn}",
                                   params.inter_small_msg_us, deps=(f"r{r}/pack",)))
            # the counterpart forwards our chunk inside node pn
            events.append(SimEvent(f"r{peer}/fwd_mm{node}", peer, f"rank{peer}/mm{node}",
                                   params.multimem_cost_us, deps=(f"r{r}/wire_to{pn}",)))
    for r in range(world):
        node, lr = divmod(r, local_world)
        for seg in range(world):
            if seg == r:
                continue
            sn, sl = divmod(seg, local_world)
            deliverer = rank_of(node, sl)
            dep = f"r{deliverer}/mm_own" if sn == node else f"r{deliverer}/fwd_mm{sn}"
            events.append(SimEvent(f"r{r}/unpack{seg}", r, f"rank{r}/unpack{seg}",
                                   params.nvlink_small_msg_us, deps=(dep,)))
    return simulate(events)


# ----------------------------------------------------------------------
# ReduceScatter overlap arithmetic

def volume_gb(m_per_rank, n_cols, dtype_bytes):
    """Per-target-block communication volume in GB."""
    return m_per_rank * n_cols * dtype_bytes / 1e9


def rs_overlap_threshold(shape, params: CostParams, local_world):
    """Minimum local-reduction bandwidth (GB/s) for perfect overlap.

    Per target node the copy engine scatters (local_world-1) blocks over the
    intra links while the NIC sends one block cross-node; the reduction must
    finish inside scatter_time - p2p_time.  It reads local_world partial
    blocks and writes one, so its volume is (local_world+1)*B.  The result
    is independent of B; ``shape`` (an (m_per_rank, n_cols, dtype_bytes)
    triple or None) only sets the volume used in the derivation.
    """
    if local_world < 2:
        raise ArgumentError("overlap threshold needs at least 2 ranks per node")
    b = volume_gb(*shape) if shape is not None else 1.0
    if b <= 0:
        raise ArgumentError("communication volume must be > 0")
    scatter_s = (local_world - 1) * b / params.nvlink_bw_gbps
    p2p_s = b / params.nic_bw_gbps
    window_s = scatter_s - p2p_s
    if window_s <= 0:
        raise OverlapInfeasibleError(
            f"scatter window {scatter_s * 1e6:.3f} us does not exceed the cross-node "
            f"send {p2p_s * 1e6:.3f} us; no reduction bandwidth can hide it")
    reduction_volume = (local_world + 1) * b
    return reduction_volume / window_s


# ----------------------------------------------------------------------
# resource partition

@dataclass(frozen=True)
class ResourcePartition:
    """SM split between compute and communication stages; copy-engine stages
    consume no SMs."""

    sm_total: int
    sm_alloc: dict
    copy_engine_stages: tuple = ("scatter",)

    def __post_init__(self):
        if self.sm_total < 1:
            raise ConfigurationError("sm_total must be >= 1")
        for stage, sms in self.sm_alloc.items():
            if sms < 0 or sms > self.sm_total:
                raise ConfigurationError(
                    f"stage {stage} wants {sms} SMs of {self.sm_total}")

    def units(self, stage):
        return self.sm_alloc.get(stage, 0)


def fig_gemm_rs_partition(sm_total=132):
    """The H800 GEMM+ReduceScatter split: 116 SMs of GEMM, copy-engine
    scatter, 1 SM cross-node send, 16 SMs first reduction, all 132 for the
    final one."""
    return ResourcePartition(
        sm_total=sm_total,
        sm_alloc={"gemm": 116, "p2p": 1, "reduce1": 16, "reduce2": 132},
        copy_engine_stages=("scatter",),
    )


def gemm_rs_stage_durations(params: CostParams, local_world, n_nodes, shape,
                            partition: ResourcePartition, gemm_us=None):
    """Stage durations (us) for the partition pipeline, derived from the
    bandwidth constants; the GEMM defaults to exactly pacing the scatter."""
    b = volume_gb(*shape)
    scatter = (local_world - 1) * b / params.nvlink_bw_gbps * 1e6
    p2p = b / params.nic_bw_gbps * 1e6
    red1_bw = partition.units("reduce1") * params.reduce_bw_per_sm_gbps
    red2_bw = partition.units("reduce2") * params.reduce_bw_per_sm_gbps
    if red1_bw <= 0 or red2_bw <= 0:
        raise ConfigurationError("reduction stages need at least one SM")
    durations = {
        "gemm": gemm_us if gemm_us is not None else n_nodes * scatter,
        "scatter": scatter,
        "p2p": p2p,
        "reduce1": (local_world + 1) * b / red1_bw * 1e6,
        "reduce2": (n_nodes + 1) * b / red2_bw * 1e6,
    }
    return durations


@dataclass
class StageTail:
    duration_us: float
    budget_us: float

    @property
    def slack_us(self):
        return self.budget_us - self.duration_us

    @property
    def tail_us(self):
        # clamp float dust so an exactly-at-threshold stage reports zero
        t = self.duration_us - self.budget_us
        return t if t > 1e-9 else 0.0


@dataclass
class PartitionReport:
    timeline: Timeline
    tails: dict
    ideal_makespan_us: float

    @property
    def makespan_us(self):
        return self.timeline.makespan_us

    @property
    def total_tail_us(self):
        t = self.makespan_us - self.ideal_makespan_us
        return t if t > 1e-9 else 0.0


def simulate_partition(partition: ResourcePartition, durations, n_iterations):
    """Schedule the pipelined GEMM+ReduceScatter stages on an SM pool plus a
    copy engine and report per-stage slack against its pacing budget.

    Budgets: each scatter must fit in one GEMM block period; the reduction
    plus the cross-node send must fit inside one scatter window (reduction
    budget = scatter - p2p, the window the bandwidth constants leave); the
    final reduction gets one extra drain window.
    """
    known = {"gemm", "scatter", "p2p", "reduce1", "reduce2"}
    unknown = set(durations) - known
    if unknown:
        raise ConfigurationError(f"unknown stages {sorted(unknown)}")
    for stage, dur in durations.items():
        if dur < 0:
            raise ConfigurationError(f"stage {stage} has negative duration")
    gemm = durations.get("gemm", 0.0)
    scatter = durations.get("scatter")
    p2p = durations.get("p2p", 0.0)
    red1 = durations.get("reduce1")
    red2 = durations.get("reduce2", 0.0)
    concurrent = partition.units("gemm") + max(partition.units("reduce1"),
                                               partition.units("p2p"))
    if scatter is not None and concurrent > partition.sm_total:
        raise ConfigurationError(
            f"GEMM plus in-flight communication stages need {concurrent} SMs "
            f"of {partition.sm_total}")

    events = []
    caps = {"sm": partition.sm_total, "copy_engine": 1}
    n = max(1, n_iterations)
    period = gemm / n if gemm else 0.0
    prev = None
    for i in range(n):
        name = f"gemm[{i}]"
        events.append(SimEvent(name, 0, "sm", period,
                               deps=(prev,) if prev else (), units=partition.units("gemm")))
        prev = name
    if scatter is not None:
        for i in range(n):
            deps = [f"gemm[{i}]"] if gemm else []
            events.append(SimEvent(f"scatter[{i}]", 0, "copy_engine", scatter,
                                   deps=tuple(deps)))
        for i in range(n):
            deps = [f"scatter[{i}]"]
            if i > 0:
                deps.append(f"p2p[{i - 1}]")
            events.append(SimEvent(f"reduce1[{i}]", 0, "sm", red1 or 0.0,
                                   deps=tuple(deps), units=partition.units("reduce1")))
            events.append(SimEvent(f"p2p[{i}]", 0, "sm", p2p,
                                   deps=(f"reduce1[{i}]",), units=partition.units("p2p")))
        events.append(SimEvent("reduce2", 0, "sm", red2,
                               deps=(f"p2p[{n - 1}]", f"gemm[{n - 1}]"),
                               units=partition.units("reduce2")))
    timeline = simulate(events, caps)

    tails = {}
    ideal = gemm
    if scatter is not None:
        tails["scatter"] = StageTail(scatter, period if gemm else scatter)
        window = scatter - p2p
        tails["reduce1"] = StageTail(red1 or 0.0, window)
        tails["p2p"] = StageTail(p2p, scatter - (red1 or 0.0))
        tails["reduce2"] = StageTail(red2, scatter)
        ideal += scatter + (red1 or 0.0) + p2p + red2
    return PartitionReport(timeline, tails, ideal)


# ----------------------------------------------------------------------
# trace replay: functional dependency graph -> event DAG

def replay_trace(trace, world_spec, topology: Topology,
                 signal_cost_us=0.1):
    """Rebuild the event DAG a recorded functional run executed.

    Per rank, ops chain in program order; every wait additionally depends on
    the transfers/signal writes that target its (rank, signal); barriers
    join all ranks.  The returned timeline is therefore isomorphic to the
    happens-before graph of the original run.
    """
    lws = world_spec.local_world_size
    events = []
    last_of_rank = {}
    barrier_count = 0
    counts = {}

    def link_for(src, dst):
        return "intra" if src // lws == dst // lws else "inter"

    # first pass: name every record and collect signal setters, so a wait
    # recorded before its setter ran still picks up the dependency
    names = []
    setters = {}  # (dst_rank, sig) -> [event names]
    pre_counts = {}
    for rec in trace:
        r = rec["rank"]
        pre_counts[r] = pre_counts.get(r, 0) + 1
        name = f"r{r}/{rec['op']}#{pre_counts[r]}"
        names.append(name)
        if rec["op"] in ("signal_op", "notify") or (
                rec["op"].startswith("putmem_signal")):
            setters.setdefault((rec["peer"], rec["sig"]), []).append(name)

    for rec in trace:
        r = rec["rank"]
        op = rec["op"]
        counts[r] = counts.get(r, 0) + 1
        name = f"r{r}/{op}#{counts[r]}"
        deps = []
        if r in last_of_rank:
            deps.append(last_of_rank[r])
        if op in ("putmem", "putmem_nbi", "putmem_signal", "putmem_signal_nbi"):
            peer = rec["peer"]
            dur = transfer_time(rec.get("nbytes", 0), link_for(r, peer), topology)
            if "sig" in rec:
                dur += signal_cost_us
            events.append(SimEvent(name, r, f"rank{r}/tx", dur, deps=tuple(deps)))
        elif op in ("signal_op", "notify"):
            events.append(SimEvent(name, r, f"rank{r}/tx", signal_cost_us, deps=tuple(deps)))
        elif op == "signal_wait_until":
            deps.extend(setters.get((r, rec["sig"]), []))
            events.append(SimEvent(name, r, f"rank{r}/wait", 0.0, deps=tuple(deps)))
        elif op == "multimem_st":
            dur = transfer_time(rec.get("nbytes", 0), "intra", topology)
            events.append(SimEvent(name, r, f"rank{r}/tx", dur, deps=tuple(deps)))
        elif op == "barrier_all":
            barrier_count += 1
            deps.extend(v for k, v in last_of_rank.items() if k != r)
            events.append(SimEvent(name, r, f"rank{r}/wait", 0.0, deps=tuple(deps)))
        else:
            events.append(SimEvent(name, r, f"rank{r}/wait", 0.0, deps=tuple(deps)))
        last_of_rank[r] = name
    return simulate(events)
