"""Command line runner: simulate, check, chain, skyline and sweep."""
from __future__ import annotations

import argparse
import copy
import json
import os
import random
import sys
from concurrent.futures import ProcessPoolExecutor

import yaml

from . import analysis
from .errors import ConfigInvalid, LeaderlessError, NotRollOptimal, SchedulerDeadlock
from .protocol_engine import PROTOCOLS, SystemConfig, default_config
from .simulation import (GEO_RTT, HOT_KEY, ConstantDelay, MatrixDelay, UniformDelay,
                         build_chain_plan, chaining_adversary, exhaustive_scheduler,
                         plan_facts, read_trace, run, write_trace)
from . import verification

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEADLOCK = 0, 1, 2, 3

# ---------------------------------------------------------------------------
# scenario config

SCHEMA = {
    "system": {"n", "F", "f"},
    "protocol": None,
    "consensus_mode": None,
    "delays": {"preset", "d", "lo", "hi", "jitter", "matrix"},
    "workload": {"clients_per_process", "rho", "commands", "closed_loop", "duration",
                 "spacing", "warmup"},
    "scheduler": {"kind", "seed", "k", "crashes", "max_crashes", "fd_timeout"},
    "seed": None,
    "outputs": {"trace", "metrics_dir"},
    "sweep": {"rho"},
}
SCHEDULERS = ("nice", "random", "exhaustive", "chain")


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigInvalid(f"{where} must be a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigInvalid(f"unknown key(s) in {where}: {sorted(extra)}")


def _num(v, where, lo=None, hi=None, integer=True):
    kinds = (int,) if integer else (int, float)
    if isinstance(v, bool) or not isinstance(v, kinds):
        raise ConfigInvalid(f"{where} must be a{'n integer' if integer else ' number'}")
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ConfigInvalid(f"{where}={v} out of range")
    return v


def parse_config(raw) -> dict:
    """Validate a scenario mapping and fill in defaults. Unknown keys at any
    level are rejected."""
    _check_keys(raw, SCHEMA, "config")
    for sect, keys in SCHEMA.items():
        if keys is not None and sect in raw:
            _check_keys(raw[sect], keys, sect)
    proto = raw.get("protocol", "epaxos")
    if proto not in PROTOCOLS:
        raise ConfigInvalid(f"unknown protocol {proto!r}")
    mode = raw.get("consensus_mode", "oracle")
    system = raw.get("system", {})
    if "n" not in system:
        raise ConfigInvalid("system.n is required")
    n = _num(system["n"], "system.n", 2)
    base = default_config(n, proto, mode)
    cfg = SystemConfig(n, _num(system.get("F", base.F), "system.F"),
                       _num(system.get("f", base.f), "system.f"), proto, mode)

    d = dict(raw.get("delays", {}))
    preset = d.get("preset", "matrix" if "matrix" in d else "constant")
    if preset == "constant":
        delays = ConstantDelay(_num(d.get("d", 1), "delays.d", 1))
    elif preset == "uniform":
        lo, hi = _num(d.get("lo", 1), "delays.lo", 1), _num(d.get("hi", 10), "delays.hi", 1)
        if lo > hi:
            raise ConfigInvalid("delays.lo > delays.hi")
        delays = UniformDelay(lo, hi)
    elif preset in ("geo", "matrix"):
        m = GEO_RTT if preset == "geo" else d.get("matrix")
        if (not isinstance(m, (list, tuple)) or len(m) != n
                or any(not isinstance(r, (list, tuple)) or len(r) != n for r in m)):
            raise ConfigInvalid(f"delay matrix must be {n}x{n}")
        m = tuple(tuple(_num(x, "delays.matrix", 0) for x in r) for r in m)
        delays = MatrixDelay(m, _num(d.get("jitter", 0), "delays.jitter", 0))
    else:
        raise ConfigInvalid(f"unknown delay preset {preset!r}")

    w = raw.get("workload", {})
    workload = {
        "clients_per_process": _num(w.get("clients_per_process", 1), "workload.clients_per_process", 1),
        "rho": _num(w.get("rho", 0.0), "workload.rho", 0, 1, integer=False),
        "commands": _num(w.get("commands", 10), "workload.commands", 0),
        "closed_loop": bool(w.get("closed_loop", False)),
        "duration": _num(w.get("duration", 1000), "workload.duration", 0),
        "spacing": _num(w.get("spacing", 5), "workload.spacing", 0),
        "warmup": _num(w.get("warmup", 0), "workload.warmup", 0),
    }

    s = raw.get("scheduler", {})
    kind = s.get("kind", "random")
    if kind not in SCHEDULERS:
        raise ConfigInvalid(f"unknown scheduler {kind!r}")
    crashes = {}
    for p, t in (s.get("crashes") or {}).items():
        p = _num(int(p) if isinstance(p, str) and p.isdigit() else p, "scheduler.crashes", 0, n - 1)
        crashes[p] = _num(t, "scheduler.crashes time", 0)
    if len(crashes) > cfg.f:
        raise ConfigInvalid(f"{len(crashes)} crashes exceed f={cfg.f}")
    sched = {"kind": kind, "k": _num(s.get("k", 1), "scheduler.k", 1), "crashes": crashes,
             "max_crashes": _num(s.get("max_crashes", 0), "scheduler.max_crashes", 0, cfg.f),
             "fd_timeout": s.get("fd_timeout")}
    if kind == "chain":
        if proto != "epaxos":
            raise ConfigInvalid("the chain scheduler needs the EPaxos protocol")
        if not verification.roll_feasible(n, cfg.F, cfg.f):
            raise ConfigInvalid(f"(F={cfg.F}, f={cfg.f}) is not ROLL-feasible for n={n}")
    seed = _num(raw.get("seed", s.get("seed", 0)), "seed")
    outputs = raw.get("outputs", {})
    sweep = raw.get("sweep", {})
    rhos = sweep.get("rho")
    if rhos is not None:
        if not isinstance(rhos, list) or not rhos:
            raise ConfigInvalid("sweep.rho must be a non-empty list")
        rhos = [_num(r, "sweep.rho", 0, 1, integer=False) for r in rhos]
    return {"cfg": cfg, "delays": delays, "workload": workload, "scheduler": sched,
            "seed": seed, "outputs": dict(outputs), "sweep_rho": rhos}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigInvalid(f"cannot read {path}: {e}") from e
    return parse_config(raw)


# ---------------------------------------------------------------------------
# runs


def open_workload(sc):
    """Open-loop submissions: round robin over processes, every `spacing`
    time units, key 42 with probability rho and a fresh key otherwise."""
    w = sc["workload"]
    rng = random.Random(sc["seed"] + 104729)
    out = []
    for i in range(w["commands"]):
        key = HOT_KEY if rng.random() < w["rho"] else 100_000 + i
        out.append((i * w["spacing"], i % sc["cfg"].n, key))
    return out


def chain_config(n) -> SystemConfig:
    """ROLL-optimal EPaxos parameters for the chain construction.

    n must be odd (n = 2f+1). The point with f = (n-1)/2 is tried first;
    when the rank construction has no room there (it needs F >= f), the
    other skyline points are tried, largest F first."""
    if n < 3 or n % 2 == 0:
        raise NotRollOptimal(f"n={n} is not of the form 2f+1 with f >= 1")
    half = (n - 1) // 2
    sky = sorted(verification.roll_skyline(n), key=lambda p: (p[1] != half, -p[0]))
    for F, f in sky:
        cfg = SystemConfig(n, F, f, "epaxos", "oracle")
        try:
            build_chain_plan(cfg, 2)
        except NotRollOptimal:
            continue
        return cfg
    raise NotRollOptimal(f"no skyline point of n={n} admits the rank construction")


def run_chain(cfg: SystemConfig, k: int) -> dict:
    """Build the chain plan, drive the adversary and measure the prefix."""
    plan = build_chain_plan(cfg, k)
    trace, prefix, cids = chaining_adversary(plan)
    head = copy.copy(trace)
    head.steps = trace.steps[:prefix]
    return {"trace": trace, "prefix": prefix, "cids": cids,
            "chain": analysis.max_live_chain(trace, upto=prefix),
            "degree": analysis.asynchrony_degree(head, only=analysis.dds_only),
            "facts": plan_facts(plan), "plan": plan}


def simulate(sc) -> tuple:
    """Run a parsed scenario. Returns (trace or None, summary dict)."""
    cfg, sched, w = sc["cfg"], sc["scheduler"], sc["workload"]
    kind = sched["kind"]
    if kind == "chain":
        res = run_chain(cfg, sched["k"])
        return res["trace"], {"commands": len(res["cids"]), "max_live_chain": res["chain"],
                              "asynchrony_degree": res["degree"]}
    if kind == "exhaustive":
        subs = [(p, k) for _, p, k in open_workload(sc)]
        total = failures = 0
        first_bad = None
        for t in exhaustive_scheduler(cfg, subs, max_crashes=sched["max_crashes"]):
            total += 1
            bad = [v for v in verification.check_trace(t, verification.SAFETY + ("Reliability",))
                   if not v.ok]
            if bad:
                failures += 1
                first_bad = first_bad or t
        return first_bad, {"maximal_runs": total, "failing_runs": failures}
    delays = ConstantDelay(1) if kind == "nice" else sc["delays"]
    crashes = {} if kind == "nice" else sched["crashes"]
    closed = None
    workload = ()
    if w["closed_loop"]:
        closed = (w["clients_per_process"], w["rho"], w["duration"])
    else:
        workload = open_workload(sc)
    trace = run(cfg, workload, seed=sc["seed"], delays=delays, crashes=crashes,
                fd_timeout=sched["fd_timeout"], closed_loop=closed)
    stats = analysis.latency_stats(trace, w["warmup"])
    summary = stats.summary()
    summary["max_live_chain"] = analysis.max_live_chain(trace)
    return trace, summary


def write_outputs(sc, trace, out_dir=None):
    outs = sc["outputs"]
    metrics = out_dir or outs.get("metrics_dir")
    path = outs.get("trace") or (os.path.join(out_dir, "trace.jsonl") if out_dir else None)
    if trace is None:
        return
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        write_trace(trace, path)
    if metrics:
        points = analysis.chain_series(trace) if sc["scheduler"]["kind"] != "exhaustive" else ()
        analysis.write_csvs(trace, metrics, analysis.latency_stats(trace, sc["workload"]["warmup"]),
                            points)


def _sweep_one(args):
    sc, rho, out_dir = args
    sc = copy.deepcopy(sc)
    sc["workload"]["rho"] = rho
    trace, summary = simulate(sc)
    sub = os.path.join(out_dir, f"rho={rho}") if out_dir else None
    if sub:
        sc["outputs"] = {}
        write_outputs(sc, trace, sub)
    return rho, summary


# ---------------------------------------------------------------------------
# subcommands


def _load(args):
    sc = load_config(args.config)
    if args.seed is not None:
        sc["seed"] = args.seed
    return sc


def cmd_simulate(args) -> int:
    sc = _load(args)
    try:
        trace, summary = simulate(sc)
    except SchedulerDeadlock as e:
        print(f"deadlock: {e}", file=sys.stderr)
        if e.trace is not None and args.out_dir:
            write_outputs(sc, e.trace, args.out_dir)
        return EXIT_DEADLOCK
    write_outputs(sc, trace, args.out_dir)
    print(json.dumps(summary, sort_keys=True))
    if summary.get("failing_runs"):
        return EXIT_FAIL
    return EXIT_OK


def cmd_check(args) -> int:
    props = None
    if args.properties:
        props = [p.strip() for p in args.properties.split(",") if p.strip()]
        unknown = [p for p in props if p not in verification.PROPERTIES]
        if unknown:
            print(f"unknown properties: {unknown}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        trace = read_trace(args.trace)
    except (OSError, ValueError, KeyError, TypeError) as e:
        print(f"cannot read trace {args.trace}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    verdicts = verification.check_trace(trace, props)
    print(verification.report(verdicts))
    return EXIT_OK if all(v.ok for v in verdicts) else EXIT_FAIL


def cmd_chain(args) -> int:
    try:
        res = run_chain(chain_config(args.n), args.k)
    except NotRollOptimal as e:
        print(f"no ROLL-optimal EPaxos configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_trace(res["trace"], os.path.join(args.out_dir, "chain.jsonl"))
    print(f"chain length {res['chain']}")
    print(f"asynchrony degree {res['degree']}")
    return EXIT_OK if res["chain"] == args.k and res["degree"] == 2 else EXIT_FAIL


def cmd_skyline(args) -> int:
    sky = sorted(verification.roll_skyline(args.n))
    print(f"skyline n={args.n}: " + ", ".join(f"(F={F}, f={f})" for F, f in sky))
    for proto, row in verification.table1(args.n).items():
        print(f"{proto:9s} " + " ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _load(args)
    rhos = sc["sweep_rho"] or [0, 0.02, 0.05, 0.10, 0.30]
    jobs = [(sc, r, args.out_dir) for r in rhos]
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                results = list(pool.map(_sweep_one, jobs))
        else:
            results = [_sweep_one(j) for j in jobs]
    except SchedulerDeadlock as e:
        print(f"deadlock: {e}", file=sys.stderr)
        return EXIT_DEADLOCK
    for rho, summary in sorted(results, key=lambda r: r[0]):
        print(json.dumps({"rho": rho, **summary}, sort_keys=True))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="leaderless")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="run one scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("check", help="verify a trace")
    p.add_argument("trace")
    p.add_argument("--properties", help="comma separated property names")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("chain", help="build a live chain with the adversary")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_chain)
    p = sub.add_parser("skyline", help="ROLL skyline and protocol table")
    p.add_argument("--n", type=int, default=5)
    p.set_defaults(func=cmd_skyline)
    p = sub.add_parser("sweep", help="run a scenario over several conflict rates")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LeaderlessError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
