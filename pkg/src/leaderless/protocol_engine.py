"""Replica logic: submit, announce, fast or slow path, decision broadcast,
and recovery of commands whose coordinator is suspected."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

from .consensus import Paxos
from .core_model import ABORT, DepsStore
from .dds import SERVICES, Announce, Outcome
from .errors import ConfigInvalid, PreconditionViolated

PROTOCOLS = tuple(SERVICES)


@dataclass(frozen=True)
class SystemConfig:
    n: int
    F: int
    f: int
    protocol: str = "epaxos"
    consensus_mode: str = "oracle"

    def __post_init__(self):
        if self.n < 2:
            raise ConfigInvalid("need at least 2 processes")
        if not 0 <= self.F <= self.n - 1:
            raise ConfigInvalid(f"F={self.F} out of range for n={self.n}")
        if not 0 <= self.f <= (self.n - 1) // 2:
            raise ConfigInvalid(f"f={self.f} exceeds a minority of n={self.n}")
        if self.protocol not in SERVICES:
            raise ConfigInvalid(f"unknown protocol {self.protocol!r}")
        if self.consensus_mode not in ("oracle", "quorum"):
            raise ConfigInvalid(f"unknown consensus mode {self.consensus_mode!r}")

    @property
    def majority(self):
        return self.n // 2 + 1

    @property
    def quorum_size(self):
        return self.n - self.F


def default_config(n, protocol="epaxos", consensus_mode="oracle"):
    """Parameters each protocol runs with: EPaxos uses fast quorums of
    floor(3n/4), Mencius contacts everybody, the rotating coordinator has no
    fast path at all (it only needs itself)."""
    f = (n - 1) // 2
    if protocol == "epaxos":
        # at n=2 the formula leaves a single-process quorum; use both
        F = min(n - (3 * n) // 4, f)
    elif protocol == "mencius":
        F = 0
    else:
        F = n - 1
    return SystemConfig(n, F, f, protocol, consensus_mode)


def coord(c) -> int:
    cid = c.id if hasattr(c, "id") else c
    return cid[0]


def fast_quorums(c, cfg: SystemConfig):
    """Lazily enumerate every process set of size >= n-F containing coord(c)."""
    p = coord(c)
    others = [q for q in range(cfg.n) if q != p]
    for size in range(cfg.quorum_size, cfg.n + 1):
        for rest in combinations(others, size - 1):
            yield frozenset((p,) + rest)


def default_quorum(c, cfg: SystemConfig) -> frozenset:
    p = coord(c)
    others = [q for q in range(cfg.n) if q != p]
    return frozenset([p] + others[: cfg.quorum_size - 1])


class Replica:
    def __init__(self, pid: int, cfg: SystemConfig, net):
        self.pid = pid
        self.cfg = cfg
        self.net = net
        self.store = DepsStore()
        self.dds = SERVICES[cfg.protocol](self)
        self.paxos = Paxos(self) if cfg.consensus_mode == "quorum" else None
        self.suspected: set = set()
        self.keys: dict = {}
        self.announces: dict = {}
        self.next_aid = 0
        self.counter = 0
        self.proposing: dict = {}  # cid -> purpose
        self.recovering: set = set()
        self.handled: set = set()  # commands this replica finished submitting/recovering

    # -- plumbing -------------------------------------------------------
    def send(self, dest, tag, body):
        self.net.send(self.pid, dest, tag, body)

    def broadcast(self, tag, body):
        for q in range(self.cfg.n):
            if q != self.pid:
                self.send(q, tag, body)

    def learn(self, cid, key):
        if key is not None or cid not in self.keys:
            self.keys[cid] = key

    def new_id(self):
        seq = self.dds.next_seq(self.counter)
        self.counter = seq + 1
        return (self.pid, seq)

    # -- submit, decide, recover -----------------------------------------
    def submit(self, cmd):
        cid = cmd.id
        if cid[0] != self.pid and cid[0] not in self.suspected:
            raise PreconditionViolated(f"p{self.pid + 1} may not submit {cid}")
        self.learn(cid, cmd.key)
        self.counter = max(self.counter, cid[1] + 1)
        self._announce(cid, cmd.key, "submit")

    def _announce(self, cid, key, purpose):
        aid = self.next_aid
        self.next_aid += 1
        ann = Announce(aid, cid, key, purpose)
        self.announces[aid] = ann
        self.net.step(self.pid, "Invoke", "announce", {"op": "announce", "cmd": cid,
                                                        "purpose": purpose})
        self.dds.start(ann)

    def announce_done(self, ann: Announce, out: Outcome):
        del self.announces[ann.aid]
        self.net.step(self.pid, "Respond", "announce", {
            "op": "outcome", "cmd": ann.cid, "purpose": ann.purpose,
            "deps": out.deps, "fast": out.fast})
        if self.store.is_decided(ann.cid):
            self.handled.add(ann.cid)
            return
        if out.fast and ann.purpose == "submit":
            self.decide(ann.cid, out.deps)
        else:
            self.propose(ann.cid, out.deps, ann.purpose)

    def propose(self, cid, value, purpose):
        self.proposing[cid] = purpose
        self.net.step(self.pid, "Invoke", "propose", {"op": "propose", "cmd": cid,
                                                       "value": value})
        if self.paxos is None:
            self.consensus_done(cid, self.net.oracle.propose(cid, value, self.pid))
        else:
            self.paxos.propose(cid, value)

    def consensus_done(self, cid, value):
        if self.proposing.pop(cid, None) is None:
            return
        self.net.step(self.pid, "Respond", "propose", {"op": "decided", "cmd": cid,
                                                        "value": value})
        if self.store.is_decided(cid):
            self.handled.add(cid)
            return
        self.decide(cid, value)

    def decide(self, cid, value):
        self.handled.add(cid)
        self.apply(cid, self.keys.get(cid), value)
        self.broadcast("commit", (cid, self.keys.get(cid), value))

    def apply(self, cid, key, value):
        """deps(c) <- D, then run whatever became stable."""
        self.learn(cid, key)
        if hasattr(self.dds, "observe"):
            self.dds.observe(cid, key)
        store = self.store
        if store.value(cid) == value:
            return
        touched = [cid]
        if value is ABORT:
            touched += sorted(store.abort(cid))
            self.net.step(self.pid, "Local", "abort", {"op": "abort", "cmd": cid})
        else:
            dropped = store.commit(cid, value)
            delta = {"op": "commit", "cmd": cid, "deps": value}
            if dropped:
                delta["dropped"] = dropped
            self.net.step(self.pid, "Local", "commit", delta)
        if cid in self.proposing and self.paxos is not None:
            self.paxos.cancel(cid)
            self.proposing.pop(cid)
        for batch in store.execute_ready(touched):
            self.net.step(self.pid, "Local", "execute", {"op": "execute", "batch": batch})
            self.net.executed(self.pid, batch)

    # -- events ---------------------------------------------------------
    def on_message(self, msg):
        tag = msg.tag
        if tag == "commit":
            cid, key, value = msg.body
            self.apply(cid, key, value)
        elif tag.startswith("px."):
            self.paxos.on_message(msg)
        else:
            self.dds.on_message(msg)
        self.check_recovery()

    def on_timer(self, tag, data):
        if tag == "px.retry" and self.paxos is not None:
            self.paxos.on_timer(*data)
        self.check_recovery()

    def on_suspect(self, q):
        self.suspected.add(q)
        for ann in list(self.announces.values()):
            if ann.aid in self.announces:
                self.dds.on_suspect(ann)
        self.check_recovery()

    def recovery_candidates(self):
        out = set(self.store.pending_refs())
        out.update(c for c in self.keys if not self.store.is_decided(c))
        if self.paxos is not None:
            out.update(c for c in self.paxos.promised if not self.store.is_decided(c))
        return out

    def check_recovery(self):
        if not self.suspected:
            return
        for cid in sorted(self.recovery_candidates()):
            if (cid[0] in self.suspected and cid not in self.recovering
                    and cid not in self.handled and not self.store.is_decided(cid)):
                self.recover(cid)

    def recover(self, cid):
        if cid[0] not in self.suspected:
            raise PreconditionViolated(f"p{cid[0] + 1} is not suspected")
        self.recovering.add(cid)
        self._announce(cid, self.keys.get(cid), "recover")

    def state_key(self):
        return (self.store_key(), self.dds.state_key(),
                None if self.paxos is None else self.paxos.state_key(),
                tuple(sorted(self.suspected)),
                tuple(sorted(a.state_key() for a in self.announces.values())),
                tuple(sorted(self.proposing.items())), tuple(sorted(self.recovering)),
                tuple(sorted(self.handled)), self.counter)

    def store_key(self):
        items = []
        for c, v in self.store.deps.items():
            items.append((c, "A" if v is ABORT else tuple(sorted(v))))
        return (tuple(sorted(items)), tuple(tuple(b) for b in self.store.executed))
