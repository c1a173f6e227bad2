"""Deterministic discrete-event simulation of a message-passing system.

Processes take atomic steps (receive, failure-detector query, local
transition, send) against a message buffer. The engine records every step
in a trace. Schedulers decide which enabled event fires next: the timed
scheduler follows per-message delays, the exhaustive explorer tries every
order, and the chaining adversary follows a fixed block plan.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import pickle
import random
from dataclasses import dataclass, field

from .core_model import ABORT, Command
from .errors import BoundsExceeded, ConfigInvalid, PlanViolation, SchedulerDeadlock
from .protocol_engine import Replica, SystemConfig, default_quorum

# ---------------------------------------------------------------------------
# delays


@dataclass(frozen=True)
class ConstantDelay:
    d: int = 1

    def __call__(self, src, dst, rng):
        return self.d

    @property
    def max(self):
        return self.d


@dataclass(frozen=True)
class UniformDelay:
    lo: int = 1
    hi: int = 10

    def __call__(self, src, dst, rng):
        return rng.randint(self.lo, self.hi)

    @property
    def max(self):
        return self.hi


@dataclass(frozen=True)
class MatrixDelay:
    """One-way delay between processes from a symmetric round-trip matrix.

    `rtt[i][j]` is a ping time; a message takes half of it, plus an optional
    uniform jitter in [0, jitter]."""

    rtt: tuple
    jitter: int = 0

    def __call__(self, src, dst, rng):
        base = self.rtt[src][dst] // 2
        return base + (rng.randint(0, self.jitter) if self.jitter else 0)

    @property
    def max(self):
        return max(max(r) for r in self.rtt) // 2 + self.jitter


SITES = ("SC", "FI", "QC", "AU", "TW")
GEO_RTT = (
    (0, 123, 25, 199, 184),
    (123, 0, 120, 308, 289),
    (25, 120, 0, 202, 182),
    (199, 308, 202, 0, 127),
    (184, 289, 182, 127, 0),
)

# ---------------------------------------------------------------------------
# trace records


@dataclass
class Message:
    id: int
    sender: int
    dest: int
    tag: str
    body: tuple
    due: int = 0
    key: tuple = None  # content identity, filled in lazily by the explorer

    def content(self):
        if self.key is None:
            self.key = (self.sender, self.dest, self.tag, repr(canon(self.body)))
        return self.key


@dataclass
class Step:
    seq: int
    time: int
    kind: str
    process: int
    tag: str = ""
    msg: int | None = None
    sender: int | None = None
    dest: int | None = None
    body: object = None
    delta: dict | None = None
    block: str | None = None
    cmd: tuple | None = None  # command a message is about
    loaded_digest: str | None = None  # kept when read back without the body

    def digest(self):
        if self.body is None:
            return self.loaded_digest
        raw = json.dumps(encode(self.body), sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(raw.encode(), digest_size=8).hexdigest()


@dataclass
class Trace:
    config: SystemConfig
    steps: list
    submissions: list  # dicts: cmd, key, process, time
    crashes: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)  # pid -> {cid: deps value}
    meta: dict = field(default_factory=dict)

    def keys(self):
        return {s["cmd"]: s["key"] for s in self.submissions}

    def messages(self):
        """msg id -> (send step index, recv step index or None)."""
        out = {}
        for i, s in enumerate(self.steps):
            if s.kind == "Send":
                out[s.msg] = [i, None]
            elif s.kind == "Recv":
                out[s.msg][1] = i
        return out


def encode(x):
    if x is ABORT:
        return "ABORT"
    if isinstance(x, (set, frozenset)):
        return sorted((encode(v) for v in x), key=_sort_key)
    if isinstance(x, (list, tuple)):
        return [encode(v) for v in x]
    if isinstance(x, dict):
        return {str(k): encode(v) for k, v in x.items()}
    return x


def canon(x):
    """Hashable form of a message body or delta that ignores set order."""
    if x is ABORT:
        return "ABORT"
    if isinstance(x, (set, frozenset)):
        return tuple(sorted(x))
    if isinstance(x, (list, tuple)):
        return tuple(canon(v) for v in x)
    if isinstance(x, dict):
        return tuple(sorted((k, canon(v)) for k, v in x.items()))
    return x


def _sort_key(v):
    return json.dumps(v, sort_keys=True)


def _ids(v):
    return tuple(tuple(x) for x in v)


def decode_delta(d):
    if d is None:
        return None
    out = dict(d)
    if "cmd" in out:
        out["cmd"] = tuple(out["cmd"])
    for k in ("deps", "value"):
        if k in out:
            out[k] = ABORT if out[k] == "ABORT" else frozenset(_ids(out[k]))
    if "dropped" in out:
        out["dropped"] = frozenset(_ids(out["dropped"]))
    if "batch" in out:
        out["batch"] = list(_ids(out["batch"]))
    return out


def trace_lines(trace: Trace):
    cfg = trace.config
    head = {"type": "header", "config": {"n": cfg.n, "F": cfg.F, "f": cfg.f,
                                         "protocol": cfg.protocol,
                                         "consensus_mode": cfg.consensus_mode},
            "submissions": [{"cmd": list(s["cmd"]), "key": s["key"], "process": s["process"],
                             "time": s["time"]} for s in trace.submissions],
            "crashes": {str(p): t for p, t in sorted(trace.crashes.items())},
            "meta": encode(trace.meta)}
    yield json.dumps(head, sort_keys=True)
    for s in trace.steps:
        rec = {"seq": s.seq, "time": s.time, "kind": s.kind, "process": s.process,
               "message-id": s.msg, "sender": s.sender, "dest": s.dest, "tag": s.tag,
               "payload-digest": s.digest()}
        if s.delta is not None:
            rec["delta"] = encode(s.delta)
        if s.block is not None:
            rec["block"] = s.block
        if s.cmd is not None:
            rec["cmd"] = list(s.cmd)
        yield json.dumps(rec, sort_keys=True)
    final = {str(p): sorted([[list(c), encode(v)] for c, v in st.items()])
             for p, st in sorted(trace.final.items())}
    yield json.dumps({"type": "final", "stores": final}, sort_keys=True)


def write_trace(trace: Trace, path):
    with open(path, "w") as fh:
        for line in trace_lines(trace):
            fh.write(line + "\n")


def read_trace(path) -> Trace:
    with open(path) as fh:
        lines = [json.loads(x) for x in fh if x.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ValueError("missing trace header")
    head = lines[0]
    cfg = SystemConfig(**head["config"])
    subs = [{"cmd": tuple(s["cmd"]), "key": s["key"], "process": s["process"],
             "time": s["time"]} for s in head["submissions"]]
    steps = []
    final = {}
    for rec in lines[1:]:
        if rec.get("type") == "final":
            for p, items in rec["stores"].items():
                final[int(p)] = {tuple(c): (ABORT if v == "ABORT" else frozenset(_ids(v)))
                                 for c, v in items}
            continue
        steps.append(Step(rec["seq"], rec["time"], rec["kind"], rec["process"], rec["tag"],
                          rec["message-id"], rec["sender"], rec["dest"], None,
                          decode_delta(rec.get("delta")), rec.get("block"),
                          tuple(rec["cmd"]) if rec.get("cmd") is not None else None,
                          rec.get("payload-digest")))
    return Trace(cfg, steps, subs, {int(p): t for p, t in head["crashes"].items()},
                 final, head.get("meta", {}))


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Holds the processes, the message buffer and the trace being built."""

    def __init__(self, cfg: SystemConfig, seed=0, delays=None, fd_timeout=None,
                 crashes=None, quorums=None):
        self.cfg = cfg
        self.rng = random.Random(seed)
        self.delays = delays or ConstantDelay(1)
        self.fd_timeout = fd_timeout if fd_timeout is not None else 10 * max(1, self.delays.max)
        self.crash_plan = dict(crashes or {})
        self.quorums = dict(quorums or {})
        from .consensus import Oracle
        self.oracle = Oracle()
        self.replicas = [Replica(p, cfg, self) for p in range(cfg.n)]
        self.buffer: dict = {}
        self.next_msg = 0
        self.now = 0
        self.steps: list = []
        self.crashed: dict = {}
        self.submissions: list = []
        self.block = None
        self.heap: list = []
        self.tick = 0
        self.client = None
        self.meta = {}
        self.heard: set = set()  # (process, command) pairs delivered
        self.timed = True  # False when a scheduler picks deliveries itself
        self.step_base = 0  # steps already handed to an earlier trace segment
        self.outcomes: list = []  # canonical announce outcomes so far
        self._rkeys: list = [None] * cfg.n  # cached replica state keys

    # -- hooks used by replicas ----------------------------------------
    def quorum_for(self, cid):
        q = self.quorums.get(cid)
        if q is None:
            q = self.quorums.get("*")
        if callable(q):
            q = q(cid)
        return frozenset(q) if q is not None else default_quorum(cid, self.cfg)

    def step(self, pid, kind, tag, delta=None, **kw):
        self.steps.append(Step(self.step_base + len(self.steps), self.now, kind, pid, tag,
                               delta=delta, block=self.block, **kw))
        if delta is not None and delta["op"] == "outcome":
            self.outcomes.append(repr(canon(delta)))

    def send(self, src, dst, tag, body):
        mid = self.next_msg
        self.next_msg += 1
        msg = Message(mid, src, dst, tag, body)
        self.buffer[mid] = msg
        self.step(src, "Send", tag, msg=mid, sender=src, dest=dst, body=body, cmd=body[0])
        if self.timed:
            msg.due = self.now + self.delays(src, dst, self.rng)
            self._push(msg.due, "deliver", mid)

    def timer(self, pid, attempt, tag, data):
        """Wake `pid` after a random backoff growing with `attempt`."""
        span = min(2 ** attempt, 64) * max(1, self.delays.max)
        self._push(self.now + self.rng.randint(1, span), "timer", (pid, tag, data))

    def executed(self, pid, batch):
        if self.client is not None:
            self.client.on_executed(self, pid, batch)

    # -- events --------------------------------------------------------
    def _push(self, t, kind, data):
        self.tick += 1
        heapq.heappush(self.heap, (t, self.tick, kind, data))

    def submit_now(self, pid, key=None, cmd=None):
        rep = self.replicas[pid]
        if pid in self.crashed:
            return None
        if cmd is None:
            cmd = Command(rep.new_id(), key)
        self.submissions.append({"cmd": cmd.id, "key": cmd.key, "process": pid,
                                 "time": self.now})
        self._rkeys[pid] = None
        self.step(pid, "Invoke", "submit", {"op": "submit", "cmd": cmd.id, "key": cmd.key})
        rep.submit(cmd)
        return cmd

    def deliver(self, mid):
        msg = self.buffer.pop(mid)
        if msg.dest in self.crashed:
            return False
        self.heard.add((msg.dest, msg.body[0]))
        self._rkeys[msg.dest] = None
        self.step(msg.dest, "Recv", msg.tag, msg=mid, sender=msg.sender, dest=msg.dest,
                  body=msg.body, cmd=msg.body[0])
        self.replicas[msg.dest].on_message(msg)
        return True

    def crash(self, pid):
        if pid in self.crashed:
            return
        self.crashed[pid] = self.now
        self.step(pid, "Crash", "crash")
        for p in range(self.cfg.n):
            if p != pid and p not in self.crashed:
                self._push(self.now + self.fd_timeout, "suspect", (p, pid))

    def suspect(self, p, q):
        if p in self.crashed:
            return
        self._rkeys[p] = None
        self.step(p, "FdQuery", "suspect", {"op": "suspect", "target": q})
        self.replicas[p].on_suspect(q)

    def schedule_submit(self, t, pid, key=None, cmd=None):
        self._push(t, "submit", (pid, key, cmd))

    def schedule_crashes(self):
        for p, t in sorted(self.crash_plan.items()):
            self._push(t, "crash", p)

    def fire(self, kind, data):
        if kind == "deliver":
            if data in self.buffer:
                self.deliver(data)
        elif kind == "submit":
            self.submit_now(*data)
        elif kind == "crash":
            self.crash(data)
        elif kind == "suspect":
            self.suspect(*data)
        elif kind == "timer":
            pid, tag, body = data
            if pid not in self.crashed:
                self._rkeys[pid] = None
                self.step(pid, "Local", tag, {"op": "timer", "cmd": body[0]})
                self.replicas[pid].on_timer(tag, body)

    def run_timed(self, max_events=2_000_000):
        """Fire events in (time, insertion) order until none remain."""
        self.schedule_crashes()
        count = 0
        while self.heap:
            t, _, kind, data = heapq.heappop(self.heap)
            self.now = max(self.now, t)
            self.fire(kind, data)
            count += 1
            if count > max_events:
                raise SchedulerDeadlock("event budget exhausted", self.trace())
        return self.trace()

    # -- results -------------------------------------------------------
    def trace(self) -> Trace:
        final = {p: r.store.snapshot() for p, r in enumerate(self.replicas)}
        return Trace(self.cfg, self.steps, self.submissions, dict(self.crashed), final,
                     dict(self.meta))

    def obligations(self):
        """Submitted commands that every correct process must decide.

        A command whose coordinator crashed before any correct process
        received a message about it cannot be told apart from one never
        submitted, so it is exempt.
        """
        correct = [p for p in range(self.cfg.n) if p not in self.crashed]
        return [s["cmd"] for s in self.submissions
                if s["cmd"][0] not in self.crashed
                or any((p, s["cmd"]) in self.heard for p in correct)]

    def undecided(self):
        out = []
        for cid in self.obligations():
            for p, r in enumerate(self.replicas):
                if p not in self.crashed and not r.store.is_decided(cid):
                    out.append((p, cid))
        return out

    def replica_key(self, p):
        if self._rkeys[p] is None:
            self._rkeys[p] = self.replicas[p].state_key()
        return self._rkeys[p]

    def state_key(self):
        buf = sorted(m.content() for m in self.buffer.values())
        return (tuple(self.replica_key(p) for p in range(self.cfg.n)), tuple(buf),
                self.oracle.state_key(), tuple(sorted(self.crashed)),
                tuple(sorted(self.outcomes)), tuple(sorted(self.heard)))


# ---------------------------------------------------------------------------
# workloads and schedulers


def unique_key_factory(start=1000):
    counter = [start]

    def nxt():
        counter[0] += 1
        return counter[0]

    return nxt


HOT_KEY = 42


class ClosedLoop:
    """Per-process pools of clients; a client resubmits once its previous
    command has executed at its coordinator."""

    def __init__(self, clients_per_process, rho, duration, rng):
        self.clients = clients_per_process
        self.rho = rho
        self.duration = duration
        self.rng = rng
        self.owner = {}
        self.fresh = 10_000

    def key(self):
        if self.rng.random() < self.rho:
            return HOT_KEY
        self.fresh += 1
        return self.fresh

    def start(self, eng):
        for p in range(eng.cfg.n):
            for c in range(self.clients):
                eng._push(0, "client", (p, c))

    def fire(self, eng, p, c):
        cmd = eng.submit_now(p, self.key())
        if cmd is not None:
            self.owner[cmd.id] = c

    def on_executed(self, eng, pid, batch):
        for cid in batch:
            if cid[0] == pid and cid in self.owner:
                c = self.owner.pop(cid)
                if eng.now < self.duration:
                    eng._push(eng.now, "client", (pid, c))


class _ClientEngine(Engine):
    def fire(self, kind, data):
        if kind == "client":
            self.client.fire(self, *data)
        else:
            super().fire(kind, data)


def nice_run_scheduler(delays):
    """Settings for a failure-free run: no crashes, constant empty FD."""
    return {"delays": delays, "crashes": {}}


def run(cfg: SystemConfig, workload=(), seed=0, delays=None, crashes=None, fd_timeout=None,
        quorums=None, closed_loop=None, check_deadlock=True) -> Trace:
    """Run a scenario under the timed scheduler.

    workload: iterable of (time, process, key) or (time, Command).
    closed_loop: optional (clients per process, rho, duration) triple.
    """
    if not isinstance(cfg, SystemConfig):
        raise ConfigInvalid("cfg must be a SystemConfig")
    for p in (crashes or {}):
        if not 0 <= p < cfg.n:
            raise ConfigInvalid(f"crash of unknown process {p}")
    eng = _ClientEngine(cfg, seed, delays, fd_timeout, crashes, quorums)
    for item in workload:
        if len(item) == 2:
            t, cmd = item
            eng.schedule_submit(t, cmd.submitter, cmd=cmd)
        else:
            t, p, key = item
            if not 0 <= p < cfg.n:
                raise ConfigInvalid(f"submission at unknown process {p}")
            eng.schedule_submit(t, p, key)
    if closed_loop is not None:
        clients, rho, duration = closed_loop
        eng.client = ClosedLoop(clients, rho, duration, random.Random(seed + 7919))
        eng.client.start(eng)
    trace = eng.run_timed()
    if check_deadlock and eng.undecided():
        raise SchedulerDeadlock(f"undecided at quiescence: {eng.undecided()[:5]}", trace)
    return trace


def random_scenario(seed, protocol=None, n=None, rho=None, commands=None, crash=True):
    """Scenario used by the randomized safety suite."""
    from .protocol_engine import default_config
    rng = random.Random(seed)
    n = n or rng.choice([3, 5, 7])
    protocol = protocol or rng.choice(["rotating", "mencius", "epaxos"])
    rho = rng.choice([0, 0.05, 0.3, 1]) if rho is None else rho
    mode = "quorum" if seed % 2 else "oracle"
    cfg = default_config(n, protocol, mode)
    count = commands or rng.randint(2, 6)
    span = 30
    keys = unique_key_factory()
    workload = []
    for _ in range(count):
        key = HOT_KEY if rng.random() < rho else keys()
        workload.append((rng.randint(0, span), rng.randrange(n), key))
    workload.sort()
    crashes = {}
    if crash:
        k = rng.randint(0, cfg.f)
        for p in rng.sample(range(n), k):
            crashes[p] = rng.randint(0, span + 20)
    delays = UniformDelay(1, 10)
    return dict(cfg=cfg, workload=workload, seed=seed, delays=delays, crashes=crashes)


# ---------------------------------------------------------------------------
# exhaustive exploration


def _enabled(eng, pending_subs, crash_budget, crashable):
    """Enabled events as {identity: event}. Identities do not depend on
    message ids, so the same event keeps its name along different paths."""
    evs = {}
    for mid, m in sorted(eng.buffer.items()):
        if m.dest not in eng.crashed:
            evs.setdefault(("d",) + m.content(), ("deliver", mid))
    seen_p = set()
    for i, (p, key) in enumerate(pending_subs):
        if p not in seen_p:
            seen_p.add(p)
            if p not in eng.crashed:
                evs[("s", p)] = ("submit", i)
    if crash_budget > len(eng.crashed):
        for p in crashable:
            if p not in eng.crashed:
                evs[("c", p)] = ("crash", p)
    for q in sorted(eng.crashed):
        for p in range(eng.cfg.n):
            if p != q and p not in eng.crashed and q not in eng.replicas[p].suspected:
                evs[("f", p, q)] = ("suspect", (p, q))
    return evs


def _owner(ident):
    """Process whose state an event reads and writes."""
    return ident[2] if ident[0] == "d" else ident[1]


def _independent(a, fa, b, fb):
    # events at different processes commute unless both consult the oracle
    return _owner(a) != _owner(b) and not (fa and fb)


class _Node:
    __slots__ = ("eng", "subs", "hist", "sleep")

    def __init__(self, eng, subs, hist, sleep):
        self.eng, self.subs, self.hist, self.sleep = eng, subs, hist, sleep


def _full_steps(hist, tail):
    parts = [tail]
    while hist is not None:
        hist, seg = hist
        parts.append(seg)
    return [s for seg in reversed(parts) for s in seg]


def _fire_untimed(eng, subs, ev):
    eng.now += 1
    kind, data = ev
    if kind == "deliver":
        eng.deliver(data)
    elif kind == "submit":
        p, k = subs.pop(data)
        eng.submit_now(p, k)
    elif kind == "crash":
        eng.crash(data)
        eng.heap.clear()
    elif kind == "suspect":
        eng.suspect(*data)


def exhaustive_scheduler(cfg: SystemConfig, workload, max_crashes=0, crashable=None,
                         state_check=None, max_states=2_000_000, reduce=True):
    """Enumerate the interleavings of enabled events up to reordering of
    independent ones, pruning states already seen. Yields one Trace per
    distinct maximal state.

    Reduction: sleep sets combined with state caching. A state reached again
    only re-explores the events that slept on every earlier visit but are
    awake now, so every reachable state and every terminal state is still
    visited.

    workload: list of (process, key) in per-process submission order.
    state_check(engine) is called on every new state and may raise.
    reduce=False turns the sleep sets off (plain search with state caching).
    """
    if cfg.n > 3 or len(workload) > 4:
        raise BoundsExceeded(f"n={cfg.n}, commands={len(workload)} exceeds n<=3, commands<=4")
    if cfg.consensus_mode != "oracle":
        raise ConfigInvalid("exhaustive exploration runs with the consensus oracle")
    crashable = list(range(cfg.n)) if crashable is None else list(crashable)
    root = Engine(cfg, 0, ConstantDelay(1), fd_timeout=0)
    root.timed = False
    root.rng = None
    seen: dict = {}  # state key -> events asleep on every visit so far
    stack = [_Node(root, list(workload), None, {})]
    while stack:
        node = stack.pop()
        eng = node.eng
        key = (eng.state_key(), tuple(node.subs))
        evs = _enabled(eng, node.subs, max_crashes, crashable)
        sleep = node.sleep
        if key in seen:
            asleep = seen[key]
            todo = [i for i in evs if i in asleep and i not in sleep]
            seen[key] = {i: f for i, f in asleep.items() if i in sleep}
            if not todo:
                continue
        else:
            seen[key] = dict(sleep)
            if len(seen) > max_states:
                raise BoundsExceeded("state budget exhausted")
            if state_check is not None:
                state_check(eng)
            if not evs:
                eng.steps = _full_steps(node.hist, eng.steps)
                eng.step_base = 0
                yield eng.trace()
                continue
            todo = [i for i in evs if i not in sleep]
            if not todo:
                continue
        # steps live outside the copied state; each child starts a new segment
        own = eng.steps
        eng.steps = []
        eng.step_base += len(own)
        hist = (node.hist, own)
        blob = pickle.dumps(eng, protocol=pickle.HIGHEST_PROTOCOL) if len(todo) > 1 else None
        children = []
        for j, ident in enumerate(todo):
            child = eng if j == len(todo) - 1 else pickle.loads(blob)
            subs = list(node.subs)
            before = child.oracle.calls
            _fire_untimed(child, subs, evs[ident])
            children.append((ident, child.oracle.calls != before, child, subs))
        # earlier siblings go to sleep in later ones when independent
        done = dict(sleep)
        pushes = []
        for ident, flag, child, subs in children:
            zs = {u: fu for u, fu in done.items()
                  if reduce and _independent(u, fu, ident, flag)}
            pushes.append(_Node(child, subs, hist, zs))
            done[ident] = flag
        stack.extend(reversed(pushes))


# ---------------------------------------------------------------------------
# chaining adversary


@dataclass
class Rank:
    Q: frozenset
    P: frozenset
    coord: int
    q: int


@dataclass
class ChainScenarioPlan:
    cfg: SystemConfig
    k: int
    ranks: list

    def blocks(self):
        """Labelled block schedule of the full run.

        For rank i: S_i, M_i|P_i, then the previous rank's remaining
        middle steps and reply processing; the last rank closes the run.
        """
        out = []
        for i in range(1, self.k + 1):
            r = self.ranks[i - 1]
            out.append(("S", i, frozenset([r.coord])))
            out.append(("M", i, r.P))
            if i > 1:
                prev = self.ranks[i - 2]
                out.append(("M", i - 1, prev.Q - prev.P - {prev.coord}))
                out.append(("R", i - 1, frozenset([prev.coord])))
        last = self.ranks[-1]
        out.append(("M", self.k, last.Q - last.P - {last.coord}))
        out.append(("R", self.k, frozenset([last.coord])))
        return out


def plan_facts(plan: ChainScenarioPlan):
    """Check F1-F5 for every adjacent pair of ranks; returns failures."""
    bad = []
    for i in range(len(plan.ranks) - 1):
        a, b = plan.ranks[i], plan.ranks[i + 1]
        if b.coord != a.q:
            bad.append((i + 1, "F1"))
        if b.P != b.Q & a.Q:
            bad.append((i + 1, "F2"))
        if b.P & a.P:
            bad.append((i + 1, "F3"))
        if b.q in b.Q or b.q == a.coord:
            bad.append((i + 1, "F4"))
        if ({b.coord} | b.P) & ({a.coord} | a.P):
            bad.append((i + 1, "F5"))
    return bad


def build_chain_plan(cfg: SystemConfig, k: int) -> ChainScenarioPlan:
    from .errors import NotRollOptimal
    from .verification import roll_skyline
    n, F, f = cfg.n, cfg.F, cfg.f
    if (F, f) not in roll_skyline(n) or F < 2:
        raise NotRollOptimal(f"(n={n}, F={F}, f={f}) is not a ROLL-optimal tuple with F >= 2")
    if k < 1:
        raise ConfigInvalid("k must be positive")
    size = n - F
    procs = list(range(n))
    Q = frozenset(procs[:size])
    coord_ = 0
    P = frozenset(sorted(Q - {coord_})[: f - 1])
    outside = [p for p in procs if p not in Q]
    q = outside[-1]
    ranks = [Rank(Q, P, coord_, q)]
    for _ in range(1, k):
        prev = ranks[-1]
        nc = prev.q
        P2 = frozenset(sorted(prev.Q - prev.P - {prev.coord})[: f - 1])
        rest = [p for p in procs if p not in prev.Q and p != nc]
        hat = {nc} | set(rest[: size - (f - 1) - 1])
        Q2 = frozenset(P2 | hat)
        # a member of P_i has already received c_i's request when c_(i+1) is
        # submitted, which keeps c_(i+1)'s late requests from spanning 3 hops
        cand = sorted(prev.P - P2) or sorted(prev.Q - P2 - {prev.coord})
        if len(Q2) != size or not cand:
            raise NotRollOptimal(f"no room for rank construction at n={n}, F={F}, f={f}")
        ranks.append(Rank(Q2, P2, nc, cand[0]))
    plan = ChainScenarioPlan(cfg, k, ranks)
    if plan_facts(plan):
        raise NotRollOptimal(f"plan breaks {plan_facts(plan)}")
    return plan


def chaining_adversary(plan: ChainScenarioPlan, deliver_commits=False):
    """Drive an EPaxos run block by block. Returns (trace, prefix_length,
    command ids) where the prefix ends before the last rank's remaining
    quorum replies.

    Only announce steps are scheduled. Decision broadcasts stay in flight
    unless `deliver_commits`, which hands them out right after each reply
    block."""
    cfg = plan.cfg
    if cfg.protocol != "epaxos":
        raise PlanViolation("the chaining adversary drives the EPaxos instantiation only")
    quorums = {}
    eng = Engine(cfg, 0, ConstantDelay(1))
    eng.timed = False
    cids = {}
    for i, r in enumerate(plan.ranks, 1):
        cids[i] = (r.coord, sum(1 for j in range(1, i) if plan.ranks[j - 1].coord == r.coord))
        quorums[cids[i]] = r.Q
    eng.quorums = quorums
    prefix = None

    def pick(tag, cid, dest=None):
        found = [m for m in sorted(eng.buffer.values(), key=lambda m: m.id)
                 if m.tag == tag and m.body[0] == cid and (dest is None or m.dest == dest)]
        return found

    def flush_commits(cid):
        if not deliver_commits:
            return
        eng.block = f"C{cid_rank[cid]}"
        for m in pick("commit", cid):
            eng.now += 1
            eng.deliver(m.id)

    cid_rank = {c: i for i, c in cids.items()}
    blocks = plan.blocks()
    for bi, (kind, i, procs) in enumerate(blocks):
        r = plan.ranks[i - 1]
        cid = cids[i]
        if kind == "M" and i == plan.k and bi == len(blocks) - 2:
            prefix = len(eng.steps)
        eng.block = f"{kind}{i}"
        if kind == "S":
            eng.now += 1
            cmd = eng.submit_now(r.coord, HOT_KEY)
            if cmd.id != cid:
                raise PlanViolation(f"expected id {cid}, engine allocated {cmd.id}")
        elif kind == "M":
            for p in sorted(procs):
                msgs = pick("ep.req", cid, p)
                if len(msgs) != 1:
                    raise PlanViolation(f"request of c{i} to p{p + 1} not in flight")
                eng.now += 1
                eng.deliver(msgs[0].id)
        else:
            msgs = pick("ep.rep", cid, r.coord)
            if len(msgs) != len(r.Q) - 1:
                raise PlanViolation(f"c{i}: {len(msgs)} replies in flight, "
                                    f"expected {len(r.Q) - 1}")
            for m in msgs:
                eng.now += 1
                eng.deliver(m.id)
            if not eng.replicas[r.coord].store.is_decided(cid):
                raise PlanViolation(f"c{i} not decided after its reply block")
            flush_commits(cid)
    eng.block = None
    eng.meta = {"chain_k": plan.k, "prefix": prefix}
    return eng.trace(), prefix, [cids[i] for i in range(1, plan.k + 1)]


# ---------------------------------------------------------------------------
# hand-built fixture


def example_graph_trace(complete=False) -> Trace:
    """Two processes reaching the dependency graph where deps(a)={b},
    deps(b)={c,d,a}, deps(c)={} and d is still pending; optionally followed
    by the decision on d, which makes everything executable."""
    cfg = SystemConfig(2, 0, 0, "epaxos", "oracle")
    eng = Engine(cfg)
    eng.timed = False
    a, c, d, b = (0, 0), (1, 0), (1, 1), (1, 2)
    keys = {a: 1, b: 1, c: 2, d: 3}
    for cid in (a, c, d, b):
        eng.submissions.append({"cmd": cid, "key": keys[cid], "process": cid[0],
                                "time": eng.now})
        eng.step(cid[0], "Invoke", "submit", {"op": "submit", "cmd": cid, "key": keys[cid]})
        eng.now += 1
    decisions = [(c, frozenset()), (a, frozenset({b})), (b, frozenset({c, d, a}))]
    if complete:
        decisions.append((d, frozenset()))
    for cid, deps in decisions:
        for p in (0, 1):
            eng.now += 1
            eng.replicas[p].apply(cid, keys[cid], deps)
    return eng.trace()
