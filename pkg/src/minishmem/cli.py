"""Scenario runner.

Three commands over JSON scenario files: ``verify`` replays a functional
collective against its dense oracle (exit 0 iff bit-exact), ``simulate``
runs the analytic timing models and writes Chrome-trace plus summary JSON,
``tune`` drives the distributed autotuner and writes its report.  Exit
codes are a stable contract: 0 success, 1 semantic failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources as importlib_resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .collectives import (
    ExpertRouting,
    allgather_ll_inter,
    allgather_push_intra,
    allgather_pull_intra,
    alltoall_combine,
    alltoall_dispatch,
    make_alltoall_buffers,
    reducescatter_inter,
    reducescatter_push_intra,
)
from .core import WorldSpec, init_world
from .costmodel import (
    fig_gemm_rs_partition,
    gemm_rs_stage_durations,
    load_params,
    ResourcePartition,
    rs_overlap_threshold,
    simulate_ag_baseline,
    simulate_ag_ll,
    simulate_partition,
)
from .errors import ConfigurationError, ShmemError
from .ll import LLBuffer, round_flag
from .pipelines import (
    ProblemShape,
    ag_gemm,
    gemm_rs,
    make_ag_gemm_buffers,
    make_gemm_rs_buffers,
)
from .primitives import SignalOp
from .swizzle import ag_order_switch, rs_inter_order
from .tuning import ConfigSpace, TuningError, tune

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

_MISMATCH_LIMIT = 20


def _schema(name):
    ref = importlib_resources.files("minishmem").joinpath(f"schemas/{name}.schema.json")
    return json.loads(ref.read_text())


def _validate(doc, schema_name, what):
    try:
        jsonschema.validate(doc, _schema(schema_name))
    except jsonschema.ValidationError as exc:
        raise ConfigurationError(f"{what} violates {schema_name} schema: {exc.message}")


def _emit(out_dir, filename, doc, schema_name):
    _validate(doc, schema_name, filename)
    if out_dir is None:
        return None
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return str(path)


def _world_from(doc, defaults, args):
    cfg = dict(defaults)
    cfg.update(doc.get("world", {}))
    if args.timeout_ms is not None:
        cfg["timeout_s"] = args.timeout_ms / 1000.0
    spec = WorldSpec(**cfg)
    return init_world(spec, scheduler=args.scheduler, seed=args.seed or 0)


def _record_mismatches(trial, rank, got, want):
    got = np.asarray(got).reshape(-1)
    want = np.asarray(want).reshape(-1)
    bad = np.nonzero(got != want)[0]
    return [
        {"trial": trial, "rank": rank, "index": int(i),
         "got": int(got[i]), "want": int(want[i])}
        for i in bad[:_MISMATCH_LIMIT]
    ]


# ----------------------------------------------------------------------
# verify scenarios

def _verify_allgather(doc, args, pull):
    trials = doc.get("trials", 3)
    corrupt = doc.get("inject_corrupt", False)
    world = _world_from(doc, {"world_size": 8}, args)
    n = doc.get("problem", {}).get("bytes_per_rank", 64)
    dst = world.alloc_symmetric(world.world_size * n)
    sigs = world.alloc_signals(world.world_size)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            shards = [rng.integers(0, 256, size=n).astype(np.uint8) for _ in range(world.world_size)]

            def body(pe):
                if pull:
                    allgather_pull_intra(pe, dst, sigs, shards[pe.rank].tobytes())
                else:
                    allgather_push_intra(pe, dst, sigs, shards[pe.rank].tobytes())
                return np.frombuffer(bytes(pe.local_view(dst)), dtype=np.uint8).copy()

            results = world.run(body)
            oracle = np.concatenate(shards)
            if corrupt and trial == 0:
                results[0] = results[0].copy()
                results[0][0] ^= 0xFF
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, oracle)
    return mismatches


def _verify_rs_intra(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 8}, args)
    chunk = doc.get("problem", {}).get("elems_per_rank", 16)
    w = world.world_size
    staging = world.alloc_symmetric(w * chunk * 8)
    psig = world.alloc_signals(w)
    rsig = world.alloc_signals(w)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            vals = [rng.integers(-1000, 1000, size=w * chunk).astype(np.int64) for _ in range(w)]

            def body(pe):
                for c in range(w):
                    pe.signal_op(pe.rank, psig.at(c), SignalOp.SET, 1)
                out = np.zeros(chunk, dtype=np.int64)
                reducescatter_push_intra(pe, staging, psig, rsig, vals[pe.rank], out)
                return out

            results = world.run(body)
            oracle = sum(v.reshape(w, chunk) for v in vals)
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, oracle[rank])
    return mismatches


def _verify_ag_ll(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 4, "n_nodes": 2}, args)
    n = doc.get("problem", {}).get("bytes_per_rank", 64)
    w = world.world_size
    dst = world.alloc_symmetric(w * n, align=8)
    llh = world.alloc_symmetric(2 * w * n, align=8)
    llbuf = LLBuffer(llh, w * n)
    psig = world.alloc_signals(w)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            shards = [rng.integers(0, 256, size=n).astype(np.uint8) for _ in range(w)]

            def body(pe):
                pe.world.copy_into(pe.rank, dst, pe.rank * n, shards[pe.rank].tobytes())
                allgather_ll_inter(pe, dst, llbuf, psig, n, flag=round_flag(trial))
                return np.frombuffer(bytes(pe.local_view(dst)), dtype=np.uint8).copy()

            results = world.run(body)
            oracle = np.concatenate(shards)
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, oracle)
    return mismatches


def _verify_rs_inter(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 8, "n_nodes": 2}, args)
    prob = doc.get("problem", {})
    w, lws, nn = world.world_size, world.local_world_size, world.n_nodes
    mpr = prob.get("m_per_rank", 4)
    n = prob.get("n", 8)
    m = mpr * w
    block_bytes = mpr * n * 8
    scatter_buf = world.alloc_symmetric(lws * block_bytes)
    partial_buf = world.alloc_symmetric(nn * block_bytes)
    psig = world.alloc_signals(w)
    csig = world.alloc_signals(nn)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            mats = [rng.integers(-1000, 1000, size=(m, n)).astype(np.int64) for _ in range(w)]

            def body(pe):
                for g in range(w):
                    pe.signal_op(pe.rank, psig.at(g), SignalOp.SET, 1)
                out = np.zeros((mpr, n), dtype=np.int64)
                reducescatter_inter(pe, mats[pe.rank], psig, csig, out,
                                    partial_buf, scatter_buf)
                return out

            results = world.run(body)
            oracle = sum(mats).reshape(w, mpr, n)
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, oracle[rank])
    return mismatches


def _verify_alltoall(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 4, "heap_bytes": 1 << 21}, args)
    prob = doc.get("problem", {})
    w = world.world_size
    n_tok = prob.get("tokens_per_rank", 8)
    experts = prob.get("experts", 4 * w)
    topk = prob.get("topk", 2)
    hidden = prob.get("hidden", 8)
    bufs = make_alltoall_buffers(world, n_tok, topk, hidden * 8)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            routes = [ExpertRouting(rng.integers(0, experts, size=(n_tok, topk)), experts)
                      for _ in range(w)]
            tokens = [rng.integers(-1000, 1000, size=(n_tok, hidden)).astype(np.int64)
                      for _ in range(w)]

            def body(pe):
                received = alltoall_dispatch(pe, tokens[pe.rank], routes[pe.rank], bufs)
                outs = [(rt, rt.data) for rt in received]  # identity experts
                combined, _ = alltoall_combine(pe, outs, n_tok, hidden, bufs)
                return combined

            results = world.run(body)
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, topk * tokens[rank])
    return mismatches


def _verify_ag_gemm(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 4, "heap_bytes": 1 << 21}, args)
    prob = doc.get("problem", {})
    shape = ProblemShape(m=prob.get("m", 32), n=prob.get("n", 32), k=prob.get("k", 32),
                         tile_m=prob.get("tile_m", 0), tile_n=prob.get("tile_n", 0))
    w = world.world_size
    rows = shape.rows_per_rank(w)
    bufs = make_ag_gemm_buffers(world, shape)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            shards = [rng.integers(-10, 10, size=(rows, shape.k)).astype(np.int64)
                      for _ in range(w)]
            b = rng.integers(-10, 10, size=(shape.k, shape.n)).astype(np.int64)

            def body(pe):
                return ag_gemm(pe, shards[pe.rank], b, shape,
                               ag_order_switch(pe.rank, w), bufs)

            results = world.run(body)
            oracle = np.vstack(shards) @ b
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(trial, rank, got, oracle)
    return mismatches


def _verify_gemm_rs(doc, args):
    trials = doc.get("trials", 3)
    world = _world_from(doc, {"world_size": 4, "heap_bytes": 1 << 21}, args)
    prob = doc.get("problem", {})
    shape = ProblemShape(m=prob.get("m", 32), n=prob.get("n", 32), k=prob.get("k", 32),
                         tile_m=prob.get("tile_m", 0), tile_n=prob.get("tile_n", 0))
    w = world.world_size
    rows = shape.rows_per_rank(w)
    bufs = make_gemm_rs_buffers(world, shape)
    rng = np.random.default_rng(args.seed or 0)
    mismatches = []
    with world:
        for trial in range(trials):
            mats = [rng.integers(-10, 10, size=(shape.m, shape.k)).astype(np.int64)
                    for _ in range(w)]
            b = rng.integers(-10, 10, size=(shape.k, shape.n)).astype(np.int64)

            def body(pe):
                sched = rs_inter_order(pe.ctx, world.n_nodes, world.local_world_size)
                return gemm_rs(pe, mats[pe.rank], b, shape, sched, bufs)

            results = world.run(body)
            oracle = sum(a @ b for a in mats)
            for rank, got in enumerate(results):
                mismatches += _record_mismatches(
                    trial, rank, got, oracle[rank * rows:(rank + 1) * rows])
    return mismatches


VERIFY_SCENARIOS = {
    "allgather-push": lambda doc, args: _verify_allgather(doc, args, pull=False),
    "allgather-pull": lambda doc, args: _verify_allgather(doc, args, pull=True),
    "reducescatter-intra": _verify_rs_intra,
    "allgather-ll": _verify_ag_ll,
    "reducescatter-inter": _verify_rs_inter,
    "alltoall": _verify_alltoall,
    "ag-gemm": _verify_ag_gemm,
    "gemm-rs": _verify_gemm_rs,
}

_DESCRIPTIONS = {
    "allgather-push": "push-mode intra-node AllGather vs concatenation oracle",
    "allgather-pull": "pull-mode intra-node AllGather vs concatenation oracle",
    "reducescatter-intra": "push-mode intra-node ReduceScatter vs chunkwise-sum oracle",
    "allgather-ll": "flag-slot cross-node AllGather vs concatenation oracle",
    "reducescatter-inter": "staged cross-node ReduceScatter vs chunkwise-sum oracle",
    "alltoall": "token dispatch/combine vs identity-expert algebra",
    "ag-gemm": "AllGather+GEMM pipeline vs dense matmul oracle",
    "gemm-rs": "GEMM+ReduceScatter pipeline vs dense oracle",
    "ag-baseline": "loop-based small-message AllGather latency estimate",
    "ag-ll": "flag-slot AllGather latency estimate",
    "rs-threshold": "reduction bandwidth needed for perfect ReduceScatter overlap",
    "partition": "SM-partition pipeline timeline and per-stage tails",
    "ag-gemm-tile": "tile-size tuning of the AllGather+GEMM pipeline",
}


# ----------------------------------------------------------------------
# simulate scenarios

def _sim_geometry(doc):
    wcfg = doc.get("world", {})
    n_nodes = wcfg.get("n_nodes", 4)
    lws = wcfg.get("local_world_size")
    if lws is None:
        lws = wcfg.get("world_size", 32) // n_nodes
    return n_nodes, lws


def _simulate(doc, args, out_dir):
    name = doc["scenario"]
    topo, cost = load_params(doc.get("params", "h800"))
    summary = {"scenario": name, "kind": "simulate", "ok": True,
               "seed": args.seed or 0, "scheduler": args.scheduler}
    outputs = {}
    if name in ("ag-baseline", "ag-ll"):
        n_nodes, lws = _sim_geometry(doc)
        tl = (simulate_ag_baseline if name == "ag-baseline" else simulate_ag_ll)(
            cost, n_nodes, lws)
        summary["makespan_us"] = tl.makespan_us
        summary["critical_path"] = tl.critical_path()
        path = _emit(out_dir, f"{name}_trace.json", tl.to_chrome_trace(), "trace")
        if path:
            outputs["trace"] = path
    elif name == "rs-threshold":
        prob = doc.get("problem", {})
        lws = doc.get("world", {}).get("local_world_size", 8)
        shape = None
        if "m_per_rank" in prob:
            shape = (prob["m_per_rank"], prob.get("n", 8192), prob.get("dtype_bytes", 2))
        summary["threshold_gbps"] = rs_overlap_threshold(shape, cost, lws)
    elif name == "partition":
        n_nodes, lws = _sim_geometry(doc)
        prob = doc.get("problem", {})
        shape = (prob.get("m_per_rank", 512), prob.get("n", 8192), prob.get("dtype_bytes", 2))
        if "allocations" in doc or "sm_total" in doc:
            part = ResourcePartition(sm_total=doc.get("sm_total", 132),
                                     sm_alloc=doc.get("allocations", {}),
                                     copy_engine_stages=("scatter",))
        else:
            part = fig_gemm_rs_partition()
        durations = gemm_rs_stage_durations(cost, lws, n_nodes, shape, part)
        report = simulate_partition(part, durations, n_nodes)
        summary["makespan_us"] = report.makespan_us
        summary["ideal_makespan_us"] = report.ideal_makespan_us
        summary["total_tail_us"] = report.total_tail_us
        summary["stage_durations_us"] = durations
        summary["tails_us"] = {k: t.tail_us for k, t in report.tails.items()}
        summary["slacks_us"] = {k: t.slack_us for k, t in report.tails.items()}
        summary["ok"] = report.total_tail_us == 0.0
        path = _emit(out_dir, "partition_trace.json",
                     report.timeline.to_chrome_trace(), "trace")
        if path:
            outputs["trace"] = path
    else:
        raise ConfigurationError(f"unknown simulate scenario {name!r}")
    if outputs:
        summary["outputs"] = outputs
    return summary


# ----------------------------------------------------------------------
# tune scenario

def _tune_ag_gemm_tile(doc, args, out_dir):
    prob = doc.get("problem", {})
    base = ProblemShape(m=prob.get("m", 32), n=prob.get("n", 32), k=prob.get("k", 32))
    axes = doc.get("axes", {"tile_m": [4, 8], "tile_n": [16, 32]})
    space = ConfigSpace(axes)
    world = _world_from(doc, {"world_size": 4, "heap_bytes": 1 << 22}, args)
    w = world.world_size
    rows = base.rows_per_rank(w)
    bufs = make_ag_gemm_buffers(world, base)
    rng = np.random.default_rng(args.seed or 0)
    shards = [rng.integers(-10, 10, size=(rows, base.k)).astype(np.int64) for _ in range(w)]
    b = rng.integers(-10, 10, size=(base.k, base.n)).astype(np.int64)

    def target(pe, cfg):
        shape = ProblemShape(m=base.m, n=base.n, k=base.k,
                             tile_m=cfg.get("tile_m", 0), tile_n=cfg.get("tile_n", 0))
        ag_gemm(pe, shards[pe.rank], b, shape, ag_order_switch(pe.rank, w), bufs)

    measure = None
    if doc.get("measure", "model") == "model":
        def measure(pe, cfg, it):
            # per-tile launch cost plus per-element work; deterministic
            tm = cfg.get("tile_m") or rows
            tn = cfg.get("tile_n") or base.n
            tiles = math.ceil(rows / tm) * math.ceil(base.n / tn) * w
            return tiles * 0.8 + base.m * base.n * base.k * 1e-4

    with world:
        report = tune(world, target, space, iterations=doc.get("iterations", 3),
                      measure=measure)
    return report


# ----------------------------------------------------------------------
# commands

def _load_scenario(args):
    if not args.config:
        raise ConfigurationError("--config is required")
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
    _validate(doc, "scenario", str(path))
    return doc


def cmd_verify(args):
    doc = _load_scenario(args)
    name = doc["scenario"]
    runner = VERIFY_SCENARIOS.get(name)
    if runner is None:
        raise ConfigurationError(
            f"unknown verify scenario {name!r}; choices: {sorted(VERIFY_SCENARIOS)}")
    mismatches = runner(doc, args)
    out_dir = Path(args.out) if args.out else None
    summary = {
        "scenario": name, "kind": "verify", "ok": not mismatches,
        "seed": args.seed or 0, "scheduler": args.scheduler,
        "trials": doc.get("trials", 3), "mismatches": mismatches,
    }
    path = _emit(out_dir, f"{name}_summary.json", summary, "summary")
    print(json.dumps(summary if not path else {**summary, "written": path}, indent=2))
    return EXIT_OK if not mismatches else EXIT_FAIL


def cmd_simulate(args):
    doc = _load_scenario(args)
    out_dir = Path(args.out) if args.out else None
    summary = _simulate(doc, args, out_dir)
    _emit(out_dir, f"{doc['scenario']}_summary.json", summary, "summary")
    print(json.dumps(summary, indent=2))
    return EXIT_OK if summary.get("ok", True) else EXIT_FAIL


def cmd_tune(args):
    doc = _load_scenario(args)
    name = doc["scenario"]
    if name != "ag-gemm-tile":
        raise ConfigurationError(f"unknown tune scenario {name!r}; choices: ['ag-gemm-tile']")
    report = _tune_ag_gemm_tile(args=args, doc=doc, out_dir=None)
    report_doc = json.loads(report.to_json())
    out_dir = Path(args.out) if args.out else None
    path = _emit(out_dir, f"{name}_report.json", report_doc, "tune_report")
    summary = {
        "scenario": name, "kind": "tune", "ok": True,
        "seed": args.seed or 0, "scheduler": args.scheduler,
        "chosen_index": report.chosen_index, "chosen_config": report.chosen_config,
    }
    if path:
        summary["outputs"] = {"report": path}
    _emit(out_dir, f"{name}_summary.json", summary, "summary")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_list(args):
    rows = [(n, "verify", _DESCRIPTIONS[n]) for n in sorted(VERIFY_SCENARIOS)]
    rows += [(n, "simulate", _DESCRIPTIONS[n])
             for n in ("ag-baseline", "ag-ll", "rs-threshold", "partition")]
    rows.append(("ag-gemm-tile", "tune", _DESCRIPTIONS["ag-gemm-tile"]))
    width = max(len(r[0]) for r in rows)
    for name, kind, desc in rows:
        print(f"{name:<{width}}  {kind:<8}  {desc}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="minishmem",
        description="Verify, simulate, or tune one-sided overlap collectives.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("verify", cmd_verify), ("simulate", cmd_simulate),
                     ("tune", cmd_tune), ("list-scenarios", cmd_list)):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        if name != "list-scenarios":
            p.add_argument("--config", required=True, help="scenario JSON file")
            p.add_argument("--seed", type=int, default=None,
                           help="RNG seed; required with --scheduler random")
            p.add_argument("--scheduler", choices=["det", "random", "free"],
                           default="free")
            p.add_argument("--out", default=None, help="output directory")
            p.add_argument("--timeout-ms", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "scheduler", None) == "random" and args.seed is None:
        print("error: --seed is required with --scheduler random", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except TuningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigurationError, ShmemError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
