"""Dependency discovery services: rotating coordinator, Mencius and EPaxos.

Each service keeps per-process state and talks to peers through the hosting
replica (`node`), which owns sending and the announce bookkeeping. The
outcome rules are also exposed as pure functions so they can be tested on
their own.

Rotating coordinator and Mencius order commands a priori by slot. A command
id (submitter, seq) doubles as the slot: round `seq`, owner `submitter`, and
slots are compared as (round, owner).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from .core_model import ABORT
from .errors import InsufficientQuorum


class Outcome(NamedTuple):
    deps: object  # frozenset of ids or ABORT
    fast: bool


def slot(cid):
    return (cid[1], cid[0])


def lower_slots(cid, n):
    r, p = cid[1], cid[0]
    out = [(q, rr) for rr in range(r) for q in range(n)]
    out += [(q, r) for q in range(p)]
    return out


def rotating_outcome(cid, n) -> Outcome:
    return Outcome(frozenset(lower_slots(cid, n)), False)


def mencius_outcome(cid, n, bailed, heard_all) -> Outcome:
    return Outcome(frozenset(lower_slots(cid, n)) - frozenset(bailed), heard_all)


def epaxos_outcome(sets) -> Outcome:
    sets = [frozenset(s) for s in sets]
    union = frozenset().union(*sets)
    return Outcome(union, all(s == sets[0] for s in sets))


def recovery_threshold(f):
    return (f + 2) // 2  # ceil((f+1)/2)


def epaxos_recovery_outcome(responses, n, f) -> Outcome:
    """responses: one entry per responder, either None (command unknown),
    ("decided", value) or ("known", recorded set)."""
    if len(responses) < n // 2 + 1:
        raise InsufficientQuorum(f"{len(responses)} of {n} responded")
    for r in responses:
        if r is not None and r[0] == "decided":
            return Outcome(r[1], False)
    known = [frozenset(r[1]) for r in responses if r is not None]
    if not known:
        return Outcome(ABORT, False)
    counts = Counter(known)
    top = [s for s, k in counts.items() if k >= recovery_threshold(f)]
    if len(top) == 1:
        return Outcome(top[0], False)
    return Outcome(frozenset().union(*known), False)


@dataclass
class Announce:
    aid: int
    cid: tuple
    key: object
    purpose: str  # "submit" or "recover"
    waiting: set = field(default_factory=set)
    replies: dict = field(default_factory=dict)
    contacted: set = field(default_factory=set)
    slow: bool = False

    def state_key(self):
        return (self.aid, self.cid, repr(self.key), self.purpose,
                tuple(sorted(self.waiting)), tuple(sorted(self.contacted)), self.slow,
                tuple(sorted((p, repr(v)) for p, v in self.replies.items())))


def _wire(s):
    return tuple(sorted(s))


class Rotating:
    """Depends on every earlier slot; never takes the fast path; recovery
    suggests abort."""

    name = "rotating"

    def __init__(self, node):
        self.node = node

    def start(self, ann: Announce):
        if ann.purpose == "recover":
            self.node.announce_done(ann, Outcome(ABORT, False))
        else:
            self.node.announce_done(ann, rotating_outcome(ann.cid, self.node.cfg.n))

    def next_seq(self, counter):
        return counter

    def on_message(self, msg):
        pass

    def on_suspect(self, ann):
        pass

    def state_key(self):
        return ()


class Mencius:
    name = "mencius"

    def __init__(self, node):
        self.node = node
        self.next_round = 0
        self.announced: set = set()  # own rounds announced
        self.bailed: set = set()  # own rounds given up
        self.known: set = set()  # ids whose request reached this process

    def next_seq(self, counter):
        r = self.next_round
        while r in self.bailed or r in self.announced:
            r += 1
        return r

    def _bail_below(self, cid):
        """Give up own unannounced rounds whose slot precedes cid's."""
        me = self.node.pid
        limit = cid[1] + 1 if me < cid[0] else cid[1]
        for r in range(self.next_round, limit):
            if r not in self.announced:
                self.bailed.add(r)
        self.next_round = max(self.next_round, limit)
        return [(me, r) for r in sorted(self.bailed) if slot((me, r)) < slot(cid)]

    def start(self, ann: Announce):
        node = self.node
        me = node.pid
        n = node.cfg.n
        if ann.purpose == "submit":
            r = ann.cid[1]
            if r in self.bailed:
                node.announce_done(ann, Outcome(ABORT, False))
                return
            self.announced.add(r)
            self.next_round = max(self.next_round, r + 1)
            self.known.add(ann.cid)
            ann.replies[me] = tuple((me, b) for b in sorted(self.bailed) if b < r)
            tag = "me.req"
            body = (ann.cid, ann.key, ann.aid)
        else:
            ann.replies[me] = self._recovery_answer(ann.cid)
            tag = "me.rec"
            body = (ann.cid, ann.aid)
        others = [q for q in range(n) if q != me]
        ann.contacted = set(others)
        ann.waiting = set(others) - node.suspected
        for q in others:
            node.send(q, tag, body)
        self._maybe_finish(ann)

    def _recovery_answer(self, cid):
        node = self.node
        v = node.store.value(cid)
        bailed = _wire(self._bail_below(cid))
        if v is not None:
            return ("decided", v, bailed)
        return ("known" if cid in self.known else None, None, bailed)

    def on_message(self, msg):
        node = self.node
        tag, body = msg.tag, msg.body
        if tag == "me.req":
            cid, key, aid = body
            self.known.add(cid)
            node.learn(cid, key)
            node.send(msg.sender, "me.rep", (cid, aid, _wire(self._bail_below(cid))))
        elif tag == "me.rec":
            cid, aid = body
            node.send(msg.sender, "me.recrep", (cid, aid, self._recovery_answer(cid)))
        elif tag in ("me.rep", "me.recrep"):
            cid, aid, info = body
            ann = node.announces.get(aid)
            if ann is None or ann.cid != cid:
                return
            ann.replies[msg.sender] = info
            ann.waiting.discard(msg.sender)
            self._maybe_finish(ann)

    def on_suspect(self, ann):
        ann.waiting -= self.node.suspected
        self._maybe_finish(ann)

    def _maybe_finish(self, ann):
        node = self.node
        if ann.waiting or len(ann.replies) < node.cfg.n // 2 + 1:
            return
        n = node.cfg.n
        if ann.purpose == "submit":
            bailed = [b for v in ann.replies.values() for b in v]
            out = mencius_outcome(ann.cid, n, bailed, len(ann.replies) == n)
        else:
            decided = [v for v in ann.replies.values() if v[0] == "decided"]
            if decided:
                out = Outcome(decided[0][1], False)
            elif any(v[0] == "known" for v in ann.replies.values()):
                bailed = [b for v in ann.replies.values() for b in v[2]]
                out = mencius_outcome(ann.cid, n, bailed, False)._replace(fast=False)
            else:
                out = Outcome(ABORT, False)
        node.announce_done(ann, out)

    def state_key(self):
        return (self.next_round, tuple(sorted(self.announced)), tuple(sorted(self.bailed)),
                tuple(sorted(self.known)))


class EPaxos:
    """EPaxos dependency discovery without sequence numbers.

    The request carries the coordinator's own conflict set, and each replica
    records the union of that set with the conflicting commands it has seen.
    """

    name = "epaxos"

    def __init__(self, node):
        self.node = node
        self.seen: dict = {}  # key -> ids seen with that key
        self.recorded: dict = {}  # id -> recorded conflict set

    def next_seq(self, counter):
        return counter

    def observe(self, cid, key):
        if key is not None:
            self.seen.setdefault(key, set()).add(cid)

    def conflicts_seen(self, cid, key):
        store = self.node.store
        return frozenset(x for x in self.seen.get(key, ()) if x != cid
                         and store.value(x) is not ABORT)

    def start(self, ann: Announce):
        node = self.node
        me = node.pid
        if ann.purpose == "submit":
            mine = self.conflicts_seen(ann.cid, ann.key)
            self.observe(ann.cid, ann.key)
            self.recorded[ann.cid] = mine
            ann.replies[me] = mine
            quorum = node.net.quorum_for(ann.cid)
            members = [q for q in sorted(quorum) if q != me]
            ann.contacted = set(members)
            ann.waiting = set(members)
            for q in members:
                node.send(q, "ep.req", (ann.cid, ann.key, _wire(mine), ann.aid))
            if any(q in node.suspected for q in members):
                self.on_suspect(ann)
            else:
                self._maybe_finish(ann)
        else:
            ann.slow = True
            ann.replies[me] = self._recovery_answer(ann.cid)
            others = [q for q in range(node.cfg.n) if q != me]
            ann.contacted = set(others)
            ann.waiting = set(others) - node.suspected
            for q in others:
                node.send(q, "ep.rec", (ann.cid, ann.aid))
            self._maybe_finish(ann)

    def _recovery_answer(self, cid):
        v = self.node.store.value(cid)
        if v is not None:
            return ("decided", v)
        if cid in self.recorded:
            return ("known", self.recorded[cid])
        return None

    def on_message(self, msg):
        node = self.node
        tag, body = msg.tag, msg.body
        if tag == "ep.req":
            cid, key, theirs, aid = body
            if cid not in self.recorded:
                mine = self.conflicts_seen(cid, key) | frozenset(theirs)
                self.observe(cid, key)
                node.learn(cid, key)
                self.recorded[cid] = mine
            node.send(msg.sender, "ep.rep", (cid, aid, _wire(self.recorded[cid])))
        elif tag == "ep.rec":
            cid, aid = body
            node.send(msg.sender, "ep.recrep", (cid, aid, self._recovery_answer(cid)))
        elif tag in ("ep.rep", "ep.recrep"):
            cid, aid, info = body
            ann = node.announces.get(aid)
            if ann is None or ann.cid != cid:
                return
            if tag == "ep.rep":
                info = frozenset(info)
            ann.replies[msg.sender] = info
            ann.waiting.discard(msg.sender)
            self._maybe_finish(ann)

    def on_suspect(self, ann):
        node = self.node
        if ann.purpose == "submit" and not ann.slow and ann.waiting & node.suspected:
            # a fast-quorum member looks crashed: ask everybody, settle for a majority
            ann.slow = True
            me = node.pid
            extra = [q for q in range(node.cfg.n) if q != me and q not in ann.contacted]
            mine = ann.replies[me]
            for q in extra:
                node.send(q, "ep.req", (ann.cid, ann.key, _wire(mine), ann.aid))
            ann.contacted |= set(extra)
            ann.waiting |= set(extra)
        ann.waiting -= node.suspected
        self._maybe_finish(ann)

    def _maybe_finish(self, ann):
        node = self.node
        if ann.waiting:
            return
        n, f = node.cfg.n, node.cfg.f
        if ann.purpose == "submit":
            if ann.slow and len(ann.replies) < n // 2 + 1:
                return
            out = epaxos_outcome(ann.replies.values())
            if ann.slow:
                out = out._replace(fast=False)
        else:
            if len(ann.replies) < n // 2 + 1:
                return
            out = epaxos_recovery_outcome(list(ann.replies.values()), n, f)
        node.announce_done(ann, out)

    def state_key(self):
        return (tuple(sorted((repr(k), tuple(sorted(v))) for k, v in self.seen.items())),
                tuple(sorted((c, _wire(v)) for c, v in self.recorded.items())))


SERVICES = {"rotating": Rotating, "mencius": Mencius, "epaxos": EPaxos}
