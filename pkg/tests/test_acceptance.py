"""Acceptance criteria 1-8. Each test prints one PASS/FAIL line."""
import itertools
import os
import random
import subprocess
import sys
import tempfile
import time

import pytest
import yaml

import negations
from leaderless.analysis import announce_latencies, contended, latency_stats, percentile
from leaderless.cli import chain_config, run_chain
from leaderless.errors import LeaderlessError
from leaderless.protocol_engine import default_config
from leaderless.simulation import (GEO_RTT, ConstantDelay, MatrixDelay, exhaustive_scheduler,
                                   random_scenario, run, write_trace)
from leaderless.verification import (SAFETY, check_generic, check_trace, reduce_to_generic,
                                     roll_skyline, table1)


def report(capsys, num, ok, detail, partial=False):
    status = "FAIL" if not ok else "PARTIAL" if partial else "PASS"
    with capsys.disabled():
        print(f"\ncriterion {num}: {status} {detail}")
    assert ok, detail


def tally(verdicts, counts):
    for v in verdicts:
        if not v.ok:
            counts[v.prop] = counts.get(v.prop, 0) + 1


# Criteria 1 and 2 also hand their traces' generic verdicts to criterion 6.
GENERIC_FAILS = {}
GENERIC_RUNS = {"suite": 0, "exhaustive": 0}


@pytest.fixture(scope="module")
def random_suite():
    fails, errors = {}, []
    t0 = time.time()
    per_proto = {}
    for seed in range(10_000):
        sc = random_scenario(seed)
        proto = sc["cfg"].protocol
        per_proto[proto] = per_proto.get(proto, 0) + 1
        try:
            t = run(**sc)
        except LeaderlessError as e:
            errors.append((seed, repr(e)))
            continue
        tally(check_trace(t, SAFETY), fails)
        tally(check_generic(reduce_to_generic(t)), GENERIC_FAILS)
        GENERIC_RUNS["suite"] += 1
    return fails, errors, per_proto, time.time() - t0


def test_criterion_1_safety_suite(random_suite, capsys):
    fails, errors, per_proto, secs = random_suite
    ok = not fails and not errors and sum(per_proto.values()) == 10_000 and secs <= 600
    report(capsys, 1, ok, f"10000 runs {per_proto}, failures {fails}, "
                          f"errors {errors[:3]}, {secs:.0f}s")


# (protocol, n, commands, max crashes, crashable processes or None for all)
EXHAUSTIVE = [
    ("epaxos", 2, 2, 0, None),
    ("mencius", 2, 2, 0, None),
    ("epaxos", 2, 3, 0, None),
    ("mencius", 2, 3, 0, None),
    ("epaxos", 3, 1, 1, None),
    ("mencius", 3, 1, 1, None),
    ("epaxos", 3, 3, 0, None),
    ("mencius", 3, 3, 0, None),
    ("epaxos", 3, 2, 1, None),
    ("mencius", 3, 2, 1, None),
    ("epaxos", 3, 3, 1, [2]),
]


@pytest.fixture(scope="module")
def exhaustive_runs():
    rows = []
    t0 = time.time()
    for proto, n, k, crashes, crashable in EXHAUSTIVE:
        wl = [(i % n, 42) for i in range(k)]
        fails = {}
        count = 0
        for t in exhaustive_scheduler(default_config(n, proto), wl, max_crashes=crashes,
                                      crashable=crashable):
            count += 1
            tally(check_trace(t, SAFETY + ("Reliability",)), fails)
            tally(check_generic(reduce_to_generic(t)), GENERIC_FAILS)
            GENERIC_RUNS["exhaustive"] += 1
        rows.append(((proto, n, k, crashes, crashable), count, fails))
    return rows, time.time() - t0


def test_criterion_2_exhaustive(exhaustive_runs, capsys):
    rows, secs = exhaustive_runs
    bad = [(r, f) for r, _, f in rows if f]
    rejected = negations.negation_verdicts()
    accepted = [p for p, v in rejected.items() if v.ok]
    total = sum(c for _, c, _ in rows)
    ok = not bad and not accepted and all(c > 0 for _, c, _ in rows) and secs <= 300
    report(capsys, 2, ok,
           f"{total} maximal runs over {len(rows)} scenarios, failures {bad}, "
           f"negation fixtures accepted {accepted}, {secs:.0f}s; not enumerated: "
           "mencius n=3 with 3 commands and 1 crash, "
           "epaxos n=3 with 3 commands and a crash of p1 or p2",
           partial=True)


# Beyond the state and time budget, see test_criterion_2_uncovered below.
UNCOVERED = [("mencius", 3, 3, 1), ("epaxos", 3, 3, 1)]


@pytest.mark.skip(reason="more than 300k states each; exceeds the 5 minute budget")
@pytest.mark.parametrize("proto,n,k,crashes", UNCOVERED)
def test_criterion_2_uncovered(proto, n, k, crashes):
    wl = [(i % n, 42) for i in range(k)]
    for t in exhaustive_scheduler(default_config(n, proto), wl, max_crashes=crashes):
        assert all(v.ok for v in check_trace(t, SAFETY + ("Reliability",)))


def test_criterion_3_optimal_latency(capsys):
    counts = {p: [0, 0] for p in ("epaxos", "mencius", "rotating")}  # announces, flag=true
    bad = []
    for proto in counts:
        for seed in range(1000):
            rng = random.Random(seed)
            n = rng.choice([3, 5, 7])
            if seed % 2:
                # distinct keys, overlapping in time
                wl = sorted((rng.randint(0, 12), rng.randrange(n), 1000 + i)
                            for i in range(rng.randint(1, 6)))
            else:
                # one key, each command submitted after the previous one is decided
                wl = [(8 * i, rng.randrange(n), 42) for i in range(rng.randint(1, 6))]
            t = run(default_config(n, proto), wl, seed=seed, delays=ConstantDelay(1))
            for a in announce_latencies(t):
                if a["purpose"] != "submit":
                    continue
                if contended(t, a["cmd"]):
                    bad.append((proto, seed, a["cmd"], "contended"))
                    continue
                counts[proto][0] += 1
                counts[proto][1] += bool(a["fast"])
                if proto != "rotating" and (a["latency"] != 2 or not a["fast"]):
                    bad.append((proto, seed, a["cmd"], a["latency"], a["fast"]))
    ok = (not bad and counts["rotating"][1] == 0
          and all(counts[p][0] == counts[p][1] > 0 for p in ("epaxos", "mencius")))
    report(capsys, 3, ok, f"1000 nice runs per protocol, (announces, flag=true) {counts}, "
                          f"violations {bad[:3]}")


def test_criterion_4_roll(capsys):
    sky_ok = roll_skyline(5) == {(2, 2)} and roll_skyline(7) == {(2, 3), (3, 2)}
    rows_bad = []
    for n in range(3, 16):
        rows = table1(n)
        f = (n - 1) // 2
        me, ep = rows["mencius"], rows["epaxos"]
        if not (me["quorum"] == n and me["f"] == f and not me["roll_optimal"]):
            rows_bad.append((n, "mencius", me))
        if not (ep["quorum"] == 3 * n // 4 and ep["roll_optimal"] == (n == 2 * ep["f"] + 1)):
            rows_bad.append((n, "epaxos", ep))
        if rows["rotating"]["roll_optimal"] or rows["rotating"]["optimal_latency"]:
            rows_bad.append((n, "rotating", rows["rotating"]))
    report(capsys, 4, sky_ok and not rows_bad,
           f"skyline(5)={sorted(roll_skyline(5))} skyline(7)={sorted(roll_skyline(7))}, "
           f"protocol table mismatches for n=3..15: {rows_bad}")


def test_criterion_5_chain(capsys):
    cfg = chain_config(5)
    bad = []
    slowest = 0.0
    for k in range(1, 33):
        t0 = time.time()
        res = run_chain(cfg, k)
        slowest = max(slowest, time.time() - t0)
        if res["chain"] != k or res["degree"] != 2 or res["facts"]:
            bad.append((k, res["chain"], res["degree"], res["facts"]))
    res = run_chain(cfg, 7)
    plan = res["plan"]
    r1, r2 = plan.ranks[:2]
    quorums = r1.Q == {0, 1, 2} and r2.Q == {2, 3, 4} and r2.P == {2}
    # every block of the trace runs at exactly the processes the plan gives it
    runs = [(b, {s.process for s in g})
            for b, g in itertools.groupby(res["trace"].steps, key=lambda s: s.block)]
    blocks = [(f"{kind}{i}", set(procs)) for kind, i, procs in plan.blocks()]
    shape = runs == blocks
    ok = not bad and quorums and shape and slowest <= 10 and (cfg.F, cfg.f) == (2, 2)
    report(capsys, 5, ok, f"k=1..32 chain/degree mismatches {bad}, n=5 rank quorums "
                          f"{'match' if quorums else 'differ'}, k=7 blocks "
                          f"{'match' if shape else 'differ'}, slowest k {slowest:.2f}s")


def test_criterion_6_reduction(random_suite, exhaustive_runs, capsys):
    ok = not GENERIC_FAILS and GENERIC_RUNS["suite"] > 0 and GENERIC_RUNS["exhaustive"] > 0
    report(capsys, 6, ok, f"generic logs of {GENERIC_RUNS['suite']} random and "
                          f"{GENERIC_RUNS['exhaustive']} exhaustive traces, "
                          f"violations {GENERIC_FAILS}")


def conflict_trend_p99(proto, rho):
    dur = 3000
    t = run(default_config(5, proto), (), seed=1, delays=MatrixDelay(GEO_RTT, 10),
            closed_loop=(32, rho, dur))
    st = latency_stats(t, warmup=dur // 5)
    return percentile([c.execute for c in st.commands if c.execute is not None], 99), st


def test_criterion_7_conflict_trend(capsys):
    t0 = time.time()
    ep0, _ = conflict_trend_p99("epaxos", 0)
    ep30, st30 = conflict_trend_p99("epaxos", 0.3)
    me = [conflict_trend_p99("mencius", r)[0] for r in (0, 0.02, 0.05, 0.10, 0.30)]
    secs = time.time() - t0
    ratio = ep30 / ep0
    spread = (max(me) - min(me)) / min(me)
    corr = st30.correlation
    ok = ratio >= 1.5 and spread < 0.2 and corr is not None and corr > 0.3 and secs <= 300
    report(capsys, 7, ok, f"EPaxos p99 {ep0} -> {ep30} ({ratio:.2f}x), Mencius p99 {me} "
                          f"(spread {spread:.1%}), EPaxos corr at 30% {corr:.2f}, {secs:.0f}s")


DET_CONFIG = {"system": {"n": 5}, "protocol": "epaxos", "consensus_mode": "quorum",
              "delays": {"preset": "geo", "jitter": 7},
              "workload": {"commands": 30, "rho": 0.3, "spacing": 3},
              "scheduler": {"kind": "random", "crashes": {3: 40}, "fd_timeout": 200},
              "seed": 17}


def test_criterion_8_determinism(capsys):
    same = []
    with tempfile.TemporaryDirectory() as d:
        for seed in range(0, 300, 7):
            paths = []
            for rep in range(2):
                paths.append(os.path.join(d, f"{seed}-{rep}.jsonl"))
                write_trace(run(**random_scenario(seed)), paths[-1])
            same.append(open(paths[0], "rb").read() == open(paths[1], "rb").read())
        # separate interpreters with different hash seeds
        cfg = os.path.join(d, "det.yaml")
        with open(cfg, "w") as fh:
            yaml.safe_dump(DET_CONFIG, fh)
        blobs = []
        for hs in ("1", "2"):
            out = os.path.join(d, f"cli{hs}")
            env = dict(os.environ, PYTHONHASHSEED=hs)
            subprocess.run([sys.executable, "-m", "leaderless.cli", "simulate", "--config", cfg,
                            "--out-dir", out], check=True, env=env, capture_output=True)
            blobs.append([open(os.path.join(out, f), "rb").read()
                          for f in ("trace.jsonl", "commands.csv", "cdf.csv", "chains.csv")])
    cli_same = blobs[0] == blobs[1]
    report(capsys, 8, all(same) and cli_same,
           f"{sum(same)}/{len(same)} in-process re-runs identical, CLI artifacts across "
           f"hash seeds {'identical' if cli_same else 'differ'}")

