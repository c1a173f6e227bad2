"""Post-hoc property checkers over traces, the ROLL feasibility calculator
and the reduction of per-process execution orders to partially ordered logs.

Each checker returns Verdicts. A failing verdict names the offending steps;
`minimize` shrinks that set greedily while the verdict still fails.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .analysis import announce_latencies, contended
from .core_model import ABORT, DepsStore
from .errors import LeaderlessError
from .protocol_engine import default_config, fast_quorums


@dataclass
class Verdict:
    prop: str
    ok: bool
    counterexample: list = field(default_factory=list)  # step indices
    detail: str = ""

    def to_json(self):
        return {"property": self.prop, "pass": self.ok,
                "counterexample": self.counterexample, "detail": self.detail}


def _fail(prop, steps, detail):
    return Verdict(prop, False, sorted(set(steps)), detail)


# ---------------------------------------------------------------------------
# SMR properties


class _Replay:
    """Per-process stores rebuilt from commit/abort deltas, with problems
    recorded instead of raised."""

    def __init__(self, trace):
        self.trace = trace
        self.keys = trace.keys()
        self.stores = {p: DepsStore() for p in range(trace.config.n)}
        self.errors = []  # (step, message)

    def apply(self, i, s):
        d = s.delta
        st = self.stores[s.process]
        try:
            if d["op"] == "commit":
                st.commit(d["cmd"], d["deps"])
            else:
                st.abort(d["cmd"])
        except LeaderlessError as e:
            self.errors.append((i, str(e)))
            return False
        return True


def _commit_steps(trace):
    for i, s in enumerate(trace.steps):
        if s.delta is not None and s.delta["op"] in ("commit", "abort"):
            yield i, s


def check_smr_properties(trace) -> list:
    keys = trace.keys()
    submitted = set(keys)
    rp = _Replay(trace)
    validity, consistency, stability = [], [], []
    first_commit = {}  # (p, cmd) -> step
    stable_seen = {}  # cmd -> (value, step)
    unstable = {p: set() for p in rp.stores}
    by_key = {p: {} for p in rp.stores}
    for i, s in _commit_steps(trace):
        d = s.delta
        c, p = d["cmd"], s.process
        if d["op"] == "commit" and c not in submitted:
            validity.append((i, f"{c} committed but never submitted"))
        if not rp.apply(i, s):
            stability.append((i, rp.errors[-1][1]))
            continue
        st = rp.stores[p]
        if d["op"] == "commit":
            first_commit.setdefault((p, c), i)
            k = keys.get(c)
            if k is not None:
                peers = by_key[p].setdefault(k, set())
                peers.add(c)
                v = st.value(c)
                for x in peers:
                    if x != c and x not in v and c not in st.value(x):
                        consistency.append(
                            (i, f"{c} and {x} committed at p{p + 1} without a dependency",
                             first_commit[(p, x)]))
            unstable[p].add(c)
        for x in sorted(unstable[p]):
            if st.is_stable(x):
                unstable[p].discard(x)
                v = st.value(x)
                prev = stable_seen.setdefault(x, (v, i))
                if prev[0] != v:
                    stability.append((i, f"{x} stable with {sorted(prev[0])} and {sorted(v)}",
                                      prev[1]))
    out = []
    for name, items in (("Validity", validity), ("Consistency", consistency),
                        ("Stability", stability)):
        if items:
            steps = [j for it in items for j in (it[0],) + tuple(it[2:])]
            out.append(_fail(name, steps, items[0][1]))
        else:
            out.append(Verdict(name, True))
    return out


def check_execution_invariants(trace) -> list:
    keys = trace.keys()
    rp = _Replay(trace)
    inv1, inv2 = [], []
    closure_at = {p: {} for p in rp.stores}
    exec_step = {p: {} for p in rp.stores}
    for i, s in enumerate(trace.steps):
        d = s.delta
        if d is None:
            continue
        if d["op"] in ("commit", "abort"):
            rp.apply(i, s)
        elif d["op"] == "execute":
            p = s.process
            st = rp.stores[p]
            batch = d["batch"]
            for x in batch:
                closure_at[p][x] = st.transitive_deps(x)
                exec_step[p][x] = i
            for a in range(len(batch)):
                for b in range(a + 1, len(batch)):
                    x, y = batch[a], batch[b]
                    if keys.get(x) is not None and keys.get(x) == keys.get(y):
                        if x not in closure_at[p][y]:
                            inv2.append((i, f"{x} before {y} in a batch at p{p + 1} "
                                            f"but not in its closure"))
    for p in rp.stores:
        done = sorted(exec_step[p].items(), key=lambda kv: kv[1])
        for x, ix in done:
            for y, iy in done:
                if iy > ix and keys.get(x) is not None and keys.get(x) == keys.get(y):
                    if y in closure_at[p][x]:
                        inv1.append((iy, f"{x} executed before {y} at p{p + 1} "
                                         f"although {y} is in its closure", ix))
    out = []
    for name, items in (("Invariant1", inv1), ("Invariant2", inv2)):
        if items:
            steps = [j for it in items for j in (it[0],) + tuple(it[2:])]
            out.append(_fail(name, steps, items[0][1]))
        else:
            out.append(Verdict(name, True))
    return out


# ---------------------------------------------------------------------------
# DDS properties


def _outcomes(trace):
    out = []
    for i, s in enumerate(trace.steps):
        d = s.delta
        if d is not None and d["op"] == "outcome":
            out.append((i, s.process, d))
    return out


def check_dds_properties(trace) -> list:
    keys = trace.keys()
    outs = _outcomes(trace)
    vis, wa = [], []
    sets = [(i, d) for i, _, d in outs if d["deps"] is not ABORT]
    by_key = {}
    for i, d in sets:
        k = keys.get(d["cmd"])
        if k is not None:
            by_key.setdefault(k, []).append((i, d))
    for group in by_key.values():
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                (i, d1), (j, d2) = group[a], group[b]
                c1, c2 = d1["cmd"], d2["cmd"]
                if c1 != c2 and c1 not in d2["deps"] and c2 not in d1["deps"]:
                    vis.append((j, f"{c1} and {c2} announced without seeing each other", i))
    committed = set()
    recovered = set()  # ids some recovery announce gave a dependency set
    for s in trace.steps:
        d = s.delta
        if d is not None and d["op"] == "commit":
            committed.add(d["cmd"])
    for i, _, d in outs:
        if d["purpose"] == "recover" and d["deps"] is not ABORT:
            recovered.add(d["cmd"])
    by_cmd = {}
    for i, _, d in outs:
        by_cmd.setdefault(d["cmd"], []).append((i, d))
    for cid, group in by_cmd.items():
        fast = [(i, d) for i, d in group if d["fast"] and d["deps"] is not ABORT]
        for i, df in fast:
            for j, d in group:
                if j == i:
                    continue
                if d["deps"] is ABORT:
                    wa.append((j, f"{cid} fast with a set but another announce aborted it", i))
                    continue
                for x in sorted(df["deps"] ^ d["deps"]):
                    if x in committed or x in recovered:
                        wa.append((j, f"{cid}: outcomes differ on {x}, which was not "
                                      f"aborted", i))
    out = []
    for name, items in (("Visibility", vis), ("WeakAgreement", wa)):
        if items:
            steps = [j for it in items for j in (it[0],) + tuple(it[2:])]
            out.append(_fail(name, steps, items[0][1]))
        else:
            out.append(Verdict(name, True))
    return out


# ---------------------------------------------------------------------------
# ROLL properties


def obligations(trace):
    """Submitted commands that correct processes must decide: those whose
    coordinator is correct, plus those some correct process heard about."""
    correct = [p for p in range(trace.config.n) if p not in trace.crashes]
    heard = set()
    for s in trace.steps:
        if s.process in correct and s.kind == "Recv" and s.cmd is not None:
            heard.add(s.cmd)
    return [x["cmd"] for x in trace.submissions
            if x["cmd"][0] not in trace.crashes or x["cmd"] in heard], correct


def check_reliability(trace) -> Verdict:
    cfg = trace.config
    if len(trace.crashes) > cfg.f:
        return Verdict("Reliability", True, detail="more crashes than tolerated, not checked")
    must, correct = obligations(trace)
    missing = [(p, c) for c in must for p in correct if c not in trace.final.get(p, {})]
    if missing:
        p, c = missing[0]
        return Verdict("Reliability", False, [], f"{c} undecided at p{p + 1} "
                                                 f"({len(missing)} gaps)")
    return Verdict("Reliability", True)


def check_optimal_latency(trace) -> Verdict:
    """In a nice run: every submit announce takes 2 message delays, returns
    flag=true when uncontended, and only names commands announced before.
    Runs with a crash or a suspicion are not nice and pass vacuously."""
    if trace.crashes or any(s.tag == "suspect" for s in trace.steps):
        return Verdict("OptimalLatency", True, [], "not a nice run")
    bad = []
    announced_at = {}
    for i, s in enumerate(trace.steps):
        if s.kind == "Invoke" and s.tag == "announce":
            announced_at.setdefault(s.delta["cmd"], i)
    for a in announce_latencies(trace):
        if a["purpose"] != "submit":
            continue
        c = a["cmd"]
        if a["latency"] != 2:
            bad.append((a["respond"], f"{c} took {a['latency']} message delays"))
        if not a["fast"] and not contended(trace, c):
            bad.append((a["respond"], f"{c} uncontended but flag is false"))
        if a["deps"] is not ABORT:
            late = [x for x in a["deps"] if announced_at.get(x, a["respond"]) >= a["respond"]]
            if late:
                bad.append((a["respond"], f"{c} depends on unannounced {late[0]}"))
    if bad:
        return _fail("OptimalLatency", [b[0] for b in bad], bad[0][1])
    return Verdict("OptimalLatency", True)


def check_load_balancing(trace, cid, quorum) -> Verdict:
    """The announce of cid only exchanged DDS messages inside `quorum`, and
    none of them is still in flight."""
    sent, got = {}, set()
    bad = []
    for i, s in enumerate(trace.steps):
        if s.cmd != cid or not (s.tag.startswith("ep.") or s.tag.startswith("me.")):
            continue
        if s.kind == "Send":
            sent[s.msg] = i
            if s.dest not in quorum or s.process not in quorum:
                bad.append((i, f"message p{s.process + 1}->p{s.dest + 1} leaves the quorum"))
        elif s.kind == "Recv":
            got.add(s.msg)
    for m, i in sent.items():
        if m not in got:
            bad.append((i, f"message {m} still pending"))
    if bad:
        return _fail("LoadBalancing", [b[0] for b in bad], bad[0][1])
    return Verdict("LoadBalancing", True)


def check_roll_properties(traces, cfg=None, quorum_runs=None) -> list:
    """Reliability over `traces`; Optimal Latency over the nice ones (no
    crashes); Load Balancing over `quorum_runs` = [(trace, cid, quorum)]."""
    out = []
    rel = [check_reliability(t) for t in traces]
    out.append(next((v for v in rel if not v.ok), Verdict("Reliability", True)))
    nice = [t for t in traces if not t.crashes]
    lat = [check_optimal_latency(t) for t in nice]
    out.append(next((v for v in lat if not v.ok), Verdict("OptimalLatency", True)))
    if quorum_runs is not None:
        lb = [check_load_balancing(t, c, q) for t, c, q in quorum_runs]
        out.append(next((v for v in lb if not v.ok), Verdict("LoadBalancing", True)))
    return out


LB_SAMPLE = 64  # quorums tried per configuration once n > 7


def load_balancing_runs(cfg, sample=None, seed=0):
    """One solo run per fast quorum of the first command of p1. Every
    quorum is tried up to n=7; beyond that a deterministic sample of
    LB_SAMPLE. Each trace records the covered fraction in meta."""
    import random

    from .simulation import run
    cid = (0, 0)
    quorums = [q for q in fast_quorums(cid, cfg) if len(q) == cfg.quorum_size]
    total = len(quorums)
    if sample is None and cfg.n > 7:
        sample = LB_SAMPLE
    if sample is not None and sample < total:
        quorums = random.Random(seed).sample(quorums, sample)
    out = []
    for q in quorums:
        t = run(cfg, [(0, 0, 42)], seed=seed, quorums={cid: q})
        t.meta["lb_coverage"] = len(quorums) / total
        out.append((t, cid, q))
    return out


# ---------------------------------------------------------------------------
# ROLL calculator


def roll_feasible(n, F, f) -> bool:
    cap = (n - 1) // 2
    return 0 <= F <= cap and 0 <= f <= cap and 2 * F + f - 1 <= n


def roll_skyline(n) -> set:
    cap = (n - 1) // 2
    feas = [(F, f) for F in range(cap + 1) for f in range(cap + 1) if roll_feasible(n, F, f)]
    return {a for a in feas
            if not any(b != a and b[0] >= a[0] and b[1] >= a[1] for b in feas)}


def table1(n):
    """Per protocol: quorum size, tolerated crashes, whether the fast path is
    ever taken, and whether the parameters are ROLL-optimal."""
    rows = {}
    sky = roll_skyline(n)
    for proto in ("rotating", "mencius", "epaxos"):
        cfg = default_config(n, proto)
        if proto == "epaxos":
            optimal = n == 2 * cfg.f + 1
        else:
            optimal = False
        rows[proto] = {"quorum": cfg.quorum_size, "F": cfg.F, "f": cfg.f,
                       "optimal_latency": proto != "rotating",
                       "roll_optimal": optimal,
                       "on_skyline": (cfg.F, cfg.f) in sky}
    return rows


# ---------------------------------------------------------------------------
# reduction to partially ordered logs


@dataclass
class PartiallyOrderedLog:
    vertices: list = field(default_factory=list)  # in append order
    edges: set = field(default_factory=set)

    def append(self, c, keys):
        k = keys.get(c)
        for d in self.vertices:
            if k is not None and keys.get(d) == k:
                self.edges.add((d, c))
        self.vertices.append(c)

    def copy(self):
        return PartiallyOrderedLog(list(self.vertices), set(self.edges))

    def is_prefix_of(self, other) -> bool:
        vs = set(self.vertices)
        if not vs <= set(other.vertices) or not self.edges <= other.edges:
            return False
        return all((a, b) in self.edges for a, b in other.edges if b in vs)


def reduce_to_generic(trace):
    """Per process: the list of logs after each executed batch."""
    keys = trace.keys()
    history = {p: [PartiallyOrderedLog()] for p in range(trace.config.n)}
    for s in trace.steps:
        d = s.delta
        if d is not None and d["op"] == "execute":
            log = history[s.process][-1].copy()
            for c in d["batch"]:
                log.append(c, keys)
            history[s.process].append(log)
    return history


def _is_dag(vertices, edges):
    succ = {v: [] for v in vertices}
    indeg = {v: 0 for v in vertices}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    todo = [v for v in vertices if indeg[v] == 0]
    seen = 0
    while todo:
        v = todo.pop()
        seen += 1
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                todo.append(w)
    return seen == len(vertices)


def check_generic(history) -> list:
    stab, cons = [], []
    for p, logs in history.items():
        for a, b in zip(logs, logs[1:]):
            if not a.is_prefix_of(b):
                stab.append(f"log of p{p + 1} is not a prefix of its later self")
    finals = {p: logs[-1] for p, logs in history.items()}
    ps = sorted(finals)
    for i in range(len(ps)):
        for j in range(i + 1, len(ps)):
            g, h = finals[ps[i]], finals[ps[j]]
            verts = list(dict.fromkeys(g.vertices + h.vertices))
            union = PartiallyOrderedLog(verts, g.edges | h.edges)
            if not _is_dag(verts, union.edges):
                cons.append(f"logs of p{ps[i] + 1} and p{ps[j] + 1} order a pair both ways")
            elif not (g.is_prefix_of(union) and h.is_prefix_of(union)):
                cons.append(f"logs of p{ps[i] + 1} and p{ps[j] + 1} have no common extension")
    return [Verdict("GenericStability", not stab, [], stab[0] if stab else ""),
            Verdict("GenericConsistency", not cons, [], cons[0] if cons else "")]


# ---------------------------------------------------------------------------
# driver


SAFETY = ("Validity", "Consistency", "Stability", "Invariant1", "Invariant2",
          "Visibility", "WeakAgreement")
PROPERTIES = SAFETY + ("Reliability", "OptimalLatency", "GenericStability",
                       "GenericConsistency")


def check_trace(trace, props=None) -> list:
    props = list(props or PROPERTIES)
    unknown = [p for p in props if p not in PROPERTIES]
    if unknown:
        raise ValueError(f"unknown properties {unknown}")
    out = []
    if {"Validity", "Consistency", "Stability"} & set(props):
        out += check_smr_properties(trace)
    if {"Invariant1", "Invariant2"} & set(props):
        out += check_execution_invariants(trace)
    if {"Visibility", "WeakAgreement"} & set(props):
        out += check_dds_properties(trace)
    if "Reliability" in props:
        out.append(check_reliability(trace))
    if "OptimalLatency" in props:
        out.append(check_optimal_latency(trace))
    if {"GenericStability", "GenericConsistency"} & set(props):
        out += check_generic(reduce_to_generic(trace))
    return [v for v in out if v.prop in props]


def minimize(trace, verdict, checker=None):
    """Greedy step deletion: drop each step of the counterexample's trace in
    turn, keeping the deletion while the property still fails. Returns the
    surviving step indices (relative to the original trace)."""
    import copy
    checker = checker or (lambda t: check_trace(t, [verdict.prop]))
    keep = list(range(len(trace.steps)))

    def fails(idx):
        t = copy.copy(trace)
        t.steps = [trace.steps[i] for i in idx]
        return any(v.prop == verdict.prop and not v.ok for v in checker(t))

    if not fails(keep):
        return verdict.counterexample
    i = 0
    while i < len(keep):
        trial = keep[:i] + keep[i + 1:]
        if fails(trial):
            keep = trial
        else:
            i += 1
    return keep


def report(verdicts) -> str:
    return json.dumps([v.to_json() for v in verdicts], indent=2, sort_keys=True)
