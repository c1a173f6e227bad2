"""Trace analytics: causal paths, asynchrony degree, live chains, command
latencies and CSV exports. Every function is pure over a Trace."""
from __future__ import annotations

import csv
import math
import os
import statistics
from dataclasses import dataclass, field

import numpy as np

from .core_model import ABORT, DepsStore
from .errors import LeaderlessError

# ---------------------------------------------------------------------------
# replay


def stores_at(trace, upto=None):
    stores = {p: DepsStore() for p in range(trace.config.n)}
    for _ in _replay_into(trace, stores, upto):
        pass
    return stores


def _replay_into(trace, stores, upto):
    steps = trace.steps if upto is None else trace.steps[:upto]
    for i, s in enumerate(steps):
        d = s.delta
        if d is None or d["op"] not in ("commit", "abort"):
            continue
        st = stores[s.process]
        if d["op"] == "commit":
            st.commit(d["cmd"], d["deps"])
        else:
            st.abort(d["cmd"])
        yield i, s


def prefix_for_time(trace, at):
    """Number of steps with timestamp <= at."""
    n = 0
    for s in trace.steps:
        if s.time > at:
            break
        n += 1
    return n


# ---------------------------------------------------------------------------
# paths and latency


@dataclass
class CausalPath:
    messages: list  # message ids m1..mk, each received where the next is sent

    @property
    def size(self):
        return len(self.messages)


def latency_of(path) -> int:
    """Message delays along a path: one per send/recv pair."""
    if isinstance(path, CausalPath):
        return path.size
    return sum(1 for kind, *_ in path if kind == "recv")


def announce_latencies(trace):
    """For every announce: (process, cmd, purpose, longest causal path from
    its Invoke to its Respond, counted in messages of that announce).

    Messages of an announce are the DDS request/reply messages about its
    command; the walk follows process order and send-to-receive edges only
    through steps taken after the Invoke.
    """
    out = []
    open_ = {}
    for i, s in enumerate(trace.steps):
        d = s.delta
        if s.kind == "Invoke" and s.tag == "announce":
            open_[(s.process, d["cmd"], d["purpose"])] = i
        elif s.kind == "Respond" and s.tag == "announce":
            key = (s.process, d["cmd"], d["purpose"])
            start = open_.pop(key)
            out.append({"process": s.process, "cmd": d["cmd"], "purpose": d["purpose"],
                        "deps": d["deps"], "fast": d["fast"], "invoke": start,
                        "respond": i,
                        "latency": _path_depth(trace.steps, start, i, s.process, d["cmd"])})
    return out


def _dds_tag(tag):
    return tag.startswith("ep.") or tag.startswith("me.")


def dds_only(step):
    return _dds_tag(step.tag)


def _path_depth(steps, start, end, proc, cid):
    depth = {proc: 0}
    sent = {}
    for s in steps[start + 1:end + 1]:
        if s.cmd != cid or not _dds_tag(s.tag):
            continue
        if s.kind == "Send" and s.process in depth:
            sent[s.msg] = depth[s.process]
        elif s.kind == "Recv" and s.msg in sent:
            depth[s.process] = max(depth.get(s.process, 0), sent[s.msg] + 1)
    return depth[proc]


# ---------------------------------------------------------------------------
# asynchrony degree


def message_table(trace, only=None):
    """Per message: sender, dest, send step, recv step (or None), plus vector
    clocks of the two steps. `only(step)` restricts which messages count."""
    n = trace.config.n
    clock = [[0] * n for _ in range(n)]
    msgs = {}
    order = []
    for i, s in enumerate(trace.steps):
        if s.kind not in ("Send", "Recv") or (only is not None and not only(s)):
            continue
        p = s.process
        if s.kind == "Recv":
            m = msgs[s.msg]
            vc = clock[p]
            for q in range(n):
                if m["send_vc"][q] > vc[q]:
                    vc[q] = m["send_vc"][q]
        clock[p][p] += 1
        vc = tuple(clock[p])
        if s.kind == "Send":
            msgs[s.msg] = {"id": s.msg, "sender": p, "dest": s.dest, "send": i,
                           "send_vc": vc, "recv": None, "recv_vc": None}
            order.append(s.msg)
        else:
            msgs[s.msg]["recv"] = i
            msgs[s.msg]["recv_vc"] = vc
    return [msgs[m] for m in order]


def path_lengths(trace, table=None):
    """L[a, b] = size of the longest path starting with message a and ending
    with message b (0 when none exists)."""
    table = table if table is not None else message_table(trace)
    idx = {m["id"]: k for k, m in enumerate(table)}
    M = len(table)
    L = np.zeros((M, M), dtype=np.int32)
    best = {}  # process -> column vector: best path ending with a message received there
    for s in trace.steps:
        if s.msg not in idx:
            continue
        if s.kind == "Send":
            b = idx[s.msg]
            col = best.get(s.process)
            if col is not None:
                L[:, b] = np.where(col > 0, col + 1, 0)
            L[b, b] = 1
        elif s.kind == "Recv":
            b = idx[s.msg]
            col = best.get(s.process)
            best[s.process] = L[:, b].copy() if col is None else np.maximum(col, L[:, b])
    return L


def concurrency(table, order="realtime"):
    """C[a, b] is true when neither message's receive precedes the other's
    send. A message that was never received precedes nothing.

    order="realtime" compares positions in the step sequence; "causal"
    uses happens-before (process order plus send-to-receive edges).
    """
    M = len(table)
    if M == 0:
        return np.zeros((0, 0), dtype=bool)
    received = np.array([m["recv"] is not None for m in table])
    if order == "realtime":
        send = np.array([m["send"] for m in table])
        recv = np.array([m["recv"] if m["recv"] is not None else -1 for m in table])
        before = received[:, None] & (recv[:, None] < send[None, :])
    elif order == "causal":
        dest = np.array([m["dest"] for m in table])
        recv_local = np.array([m["recv_vc"][m["dest"]] if m["recv_vc"] else 0 for m in table])
        send_vc = np.array([m["send_vc"] for m in table])
        # before[a, b]: recv(a) happens before send(b)
        before = received[:, None] & (send_vc[:, dest].T >= recv_local[:, None])
    else:
        raise ValueError(f"unknown order {order!r}")
    return ~before & ~before.T


def asynchrony_degree(trace, only=None, order="realtime") -> int:
    """Largest path size overlapped by some message; overlap means the
    message is concurrent with the first and the last message of the path.
    `only(step)` restricts the messages considered."""
    table = message_table(trace, only)
    if not table:
        return 0
    L = path_lengths(trace, table)
    C = concurrency(table, order)
    best = 0
    for m in range(len(table)):
        rows = np.flatnonzero(C[m])
        if rows.size == 0:
            continue
        sub = L[np.ix_(rows, rows)]
        best = max(best, int(sub.max()))
    return best


# ---------------------------------------------------------------------------
# chains


@dataclass
class Chain:
    commands: list  # x1..xm with x(j+1) in deps(x(j)); xm is the tail
    witness: list = field(default_factory=list)  # per link: (process, step index)

    def __len__(self):
        return len(self.commands)


def dependency_edges(trace, upto=None):
    """Every (x, y) with y in deps(x) at some process before step `upto`,
    mapped to the first (process, step) where it was observed."""
    edges = {}
    for i, s in enumerate(trace.steps if upto is None else trace.steps[:upto]):
        d = s.delta
        if d is not None and d["op"] == "commit":
            for y in d["deps"]:
                edges.setdefault((d["cmd"], y), (s.process, i))
    return edges


def find_live_chains(trace, at=None, upto=None, budget=200_000):
    """Longest live chain ending at each live tail, at time `at` (or after the
    first `upto` steps). A link x -> y is witnessed independently at some
    process; the tail is live when it is stable at no process.

    Chains are simple paths; enumerating every maximal one is exponential,
    so one longest chain per tail is reported, and chains that are suffixes
    of longer reported ones are dropped.
    """
    if upto is None and at is not None:
        upto = prefix_for_time(trace, at)
    stores = stores_at(trace, upto)
    edges = dependency_edges(trace, upto)
    # drop links to ids that ended up aborted everywhere they were decided
    nodes = {x for e in edges for x in e}
    nodes |= {s["cmd"] for s in trace.submissions}
    live = {x for x in nodes
            if not any(st.is_stable(x) for st in stores.values())
            and not any(st.value(x) is ABORT for st in stores.values())}
    preds = {}
    for (x, y) in edges:
        if x != y:
            preds.setdefault(y, set()).add(x)
    chains = []
    for tail in sorted(live):
        path = _longest_back(tail, preds, budget)
        cmds = list(reversed(path))
        wit = [edges[(cmds[j], cmds[j + 1])] for j in range(len(cmds) - 1)]
        chains.append(Chain(cmds, wit))
    chains.sort(key=lambda c: (-len(c), c.commands))
    kept = []
    for c in chains:
        if not any(len(k) > len(c) and k.commands[-len(c):] == c.commands for k in kept):
            kept.append(c)
    return kept


def _longest_back(tail, preds, budget):
    """Longest simple path ending at tail, walking predecessor links.
    Branch and bound; gives the best found if the budget runs out."""
    best = [tail]
    path = [tail]
    on = {tail}
    left = [budget]

    def reach(x):
        seen = set()
        todo = [x]
        while todo:
            y = todo.pop()
            for z in preds.get(y, ()):
                if z not in on and z not in seen:
                    seen.add(z)
                    todo.append(z)
        return len(seen)

    cap = 1 + reach(tail)

    def walk(x):
        nonlocal best
        if len(path) > len(best):
            best = list(path)
        if len(best) == cap or left[0] <= 0:
            return
        left[0] -= 1
        if len(path) + reach(x) <= len(best):
            return
        nxt = [z for z in preds.get(x, ()) if z not in on]
        nxt.sort(key=lambda z: (sum(1 for w in preds.get(z, ()) if w not in on), z))
        for z in nxt:
            path.append(z)
            on.add(z)
            walk(z)
            on.discard(z)
            path.pop()
            if len(best) == cap or left[0] <= 0:
                return

    walk(tail)
    return best


def max_live_chain(trace, at=None, upto=None):
    chains = find_live_chains(trace, at, upto)
    return max((len(c) for c in chains), default=0)


# ---------------------------------------------------------------------------
# contention and latency statistics


def contended(trace, cid) -> bool:
    """True when some conflicting command was submitted before cid and was
    not committed at cid's coordinator when cid was submitted."""
    keys = trace.keys()
    if cid not in keys:
        raise LeaderlessError(f"{cid} was not submitted")
    sub_at = None
    for i, s in enumerate(trace.steps):
        if s.kind == "Invoke" and s.tag == "submit" and s.delta["cmd"] == cid:
            sub_at = i
            break
    earlier = set()
    for s in trace.steps[:sub_at]:
        if s.kind == "Invoke" and s.tag == "submit":
            d = s.delta["cmd"]
            if d != cid and keys.get(d) == keys[cid]:
                earlier.add(d)
    committed = set()
    for s in trace.steps[:sub_at]:
        if s.process == cid[0] and s.delta is not None and s.delta["op"] == "commit":
            committed.add(s.delta["cmd"])
    return bool(earlier - committed)


@dataclass
class CommandStats:
    cmd: tuple
    submit: int
    commit: int | None
    execute: int | None  # last replica to execute
    batch_size: int | None
    execute_local: int | None = None  # at the coordinator, as a client sees it


def command_stats(trace):
    subs = {s["cmd"]: s for s in trace.submissions}
    commit = {}
    execute = {}
    local = {}
    batch = {}
    for s in trace.steps:
        d = s.delta
        if d is None:
            continue
        if d["op"] == "commit" and s.process == d["cmd"][0] and d["cmd"] not in commit:
            commit[d["cmd"]] = s.time
        elif d["op"] == "execute":
            for x in d["batch"]:
                execute[x] = max(execute.get(x, s.time), s.time)
                if s.process == x[0]:
                    batch[x] = len(d["batch"])
                    local.setdefault(x, s.time)
    out = []
    for cid, s in subs.items():
        t0 = s["time"]
        out.append(CommandStats(cid, t0,
                                commit[cid] - t0 if cid in commit else None,
                                execute[cid] - t0 if cid in execute else None,
                                batch.get(cid),
                                local[cid] - t0 if cid in local else None))
    return out


def cdf(values):
    vals = sorted(values)
    n = len(vals)
    rows = []
    for i, v in enumerate(vals):
        if i + 1 < n and vals[i + 1] == v:
            continue
        rows.append((v, (i + 1) / n))
    return rows


def percentile(values, q):
    """Nearest-rank percentile; None on empty input."""
    vals = sorted(values)
    if not vals:
        return None
    k = max(0, math.ceil(q / 100 * len(vals)) - 1)
    return vals[k]


def correlation(xs, ys):
    if len(xs) < 2 or len(set(xs)) < 2 or len(set(ys)) < 2:
        return None
    return statistics.correlation(xs, ys)


@dataclass
class LatencyStats:
    commands: list
    cdf: list
    correlation: float | None

    def summary(self):
        ex = [c.execute for c in self.commands if c.execute is not None]
        co = [c.commit for c in self.commands if c.commit is not None]
        lo = [c.execute_local for c in self.commands if c.execute_local is not None]
        return {"commands": len(self.commands),
                "commit_p50": percentile(co, 50), "commit_p99": percentile(co, 99),
                "execute_p50": percentile(ex, 50), "execute_p99": percentile(ex, 99),
                "client_execute_p50": percentile(lo, 50),
                "client_execute_p99": percentile(lo, 99)}


def latency_stats(trace, warmup=0) -> LatencyStats:
    """Per-command latencies, the CDF of execute latency and its correlation
    with batch size. Commands submitted before `warmup` are skipped."""
    rows = [c for c in command_stats(trace) if c.submit >= warmup]
    ex = [c for c in rows if c.execute is not None and c.batch_size is not None]
    return LatencyStats(rows, cdf([c.execute for c in rows if c.execute is not None]),
                        correlation([c.execute for c in ex], [c.batch_size for c in ex]))


def write_csvs(trace, out_dir, stats=None, chain_points=()):
    os.makedirs(out_dir, exist_ok=True)
    stats = stats or latency_stats(trace)
    with open(os.path.join(out_dir, "cdf.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["latency", "fraction"])
        w.writerows(stats.cdf)
    with open(os.path.join(out_dir, "commands.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "submit", "commit", "execute", "client_execute", "batch_size"])
        for c in stats.commands:
            w.writerow([f"p{c.cmd[0] + 1}.{c.cmd[1]}", c.submit, _blank(c.commit),
                        _blank(c.execute), _blank(c.execute_local), _blank(c.batch_size)])
    with open(os.path.join(out_dir, "chains.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "max_live_chain_len"])
        w.writerows(chain_points)


def _blank(v):
    return "" if v is None else v


def chain_series(trace, samples=20):
    """(time, max live chain length) at evenly spaced times."""
    if not trace.steps:
        return []
    end = trace.steps[-1].time
    times = sorted({round(end * i / samples) for i in range(samples + 1)})
    return [(t, max_live_chain(trace, at=t)) for t in times]
