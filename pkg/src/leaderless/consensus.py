"""Per-command consensus objects.

Two modes share one interface. The oracle is a decision register held by the
simulator: the first proposal wins and every later caller gets it back in the
same step. The quorum mode is single-decree Paxos among all processes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import Stalled


@dataclass
class Instance:
    cid: tuple
    decided: object = None
    proposals: list = field(default_factory=list)


class Oracle:
    def __init__(self):
        self.instances: dict = {}
        self.calls = 0

    def propose(self, cid, value, proposer):
        self.calls += 1
        inst = self.instances.setdefault(cid, Instance(cid))
        inst.proposals.append((proposer, value))
        if inst.decided is None:
            inst.decided = value
        return inst.decided

    def decided(self, cid):
        inst = self.instances.get(cid)
        return None if inst is None else inst.decided

    def state_key(self):
        return tuple(sorted((c, repr(i.decided)) for c, i in self.instances.items()))


@dataclass
class _Proposal:
    ballot: tuple
    value: object
    phase: str  # "prepare", "accept" or "backoff"
    promises: dict = field(default_factory=dict)
    accepts: set = field(default_factory=set)


class Paxos:
    """Acceptor and proposer roles of one process.

    Ballots are (attempt, proposer index). The coordinator of a command owns
    ballot (0, coord) and may skip the prepare phase with it, since no other
    process can use that ballot.
    """

    def __init__(self, node):
        self.node = node
        self.promised: dict = {}
        self.accepted: dict = {}  # cid -> (ballot, value)
        self.props: dict = {}
        self.max_seen: dict = {}

    @property
    def majority(self):
        return self.node.cfg.n // 2 + 1

    def alive_possible(self):
        return self.node.cfg.n - len(self.node.suspected)

    def propose(self, cid, value):
        node = self.node
        if self.alive_possible() < self.majority:
            raise Stalled(f"no majority alive for {cid}")
        first = cid not in self.max_seen and node.pid == cid[0]
        if first:
            ballot = (0, node.pid)
            prop = _Proposal(ballot, value, "accept")
            self.props[cid] = prop
            self._send_accept(cid, prop)
        else:
            self._start_prepare(cid, value)

    def _start_prepare(self, cid, value):
        attempt = self.max_seen.get(cid, 0) + 1
        self.max_seen[cid] = attempt
        ballot = (attempt, self.node.pid)
        prop = _Proposal(ballot, value, "prepare")
        self.props[cid] = prop
        self.node.broadcast("px.prepare", (cid, ballot))
        self._on_promise(cid, ballot, self.node.pid, *self._prepare(cid, ballot))

    def _send_accept(self, cid, prop):
        self.node.broadcast("px.accept", (cid, prop.ballot, prop.value))
        if self._accept(cid, prop.ballot, prop.value):
            self._on_accepted(cid, prop.ballot, self.node.pid)

    def cancel(self, cid):
        self.props.pop(cid, None)

    # acceptor side
    def _prepare(self, cid, ballot):
        self._see(ballot, cid)
        if ballot > self.promised.get(cid, (-1, -1)):
            self.promised[cid] = ballot
            acc = self.accepted.get(cid)
            return True, acc
        return False, self.promised[cid]

    def _accept(self, cid, ballot, value):
        self._see(ballot, cid)
        if ballot >= self.promised.get(cid, (-1, -1)):
            self.promised[cid] = ballot
            self.accepted[cid] = (ballot, value)
            return True
        return False

    def _see(self, ballot, cid):
        if ballot[0] > self.max_seen.get(cid, 0):
            self.max_seen[cid] = ballot[0]

    def on_message(self, msg):
        tag, body, src = msg.tag, msg.body, msg.sender
        node = self.node
        if tag == "px.prepare":
            cid, ballot = body
            ok, info = self._prepare(cid, ballot)
            if ok:
                node.send(src, "px.promise", (cid, ballot, info))
            else:
                node.send(src, "px.nack", (cid, ballot, info))
        elif tag == "px.accept":
            cid, ballot, value = body
            if self._accept(cid, ballot, value):
                node.send(src, "px.accepted", (cid, ballot))
            else:
                node.send(src, "px.nack", (cid, ballot, self.promised[cid]))
        elif tag == "px.promise":
            cid, ballot, acc = body
            self._on_promise(cid, ballot, src, True, acc)
        elif tag == "px.accepted":
            cid, ballot = body
            self._on_accepted(cid, ballot, src)
        elif tag == "px.nack":
            cid, ballot, promised = body
            self._see(promised, cid)
            prop = self.props.get(cid)
            if prop is not None and prop.ballot == ballot and prop.phase != "backoff":
                # competing proposer: wait a random while before retrying
                prop.phase = "backoff"
                node.net.timer(node.pid, ballot[0] + 1, "px.retry", (cid, ballot))

    def on_timer(self, cid, ballot):
        prop = self.props.get(cid)
        if prop is not None and prop.ballot == ballot and prop.phase == "backoff":
            self._start_prepare(cid, prop.value)

    def _on_promise(self, cid, ballot, src, ok, acc):
        prop = self.props.get(cid)
        if prop is None or prop.ballot != ballot or prop.phase != "prepare" or not ok:
            return
        prop.promises[src] = acc
        if len(prop.promises) >= self.majority:
            prior = [a for a in prop.promises.values() if a is not None]
            if prior:
                prop.value = max(prior, key=lambda a: a[0])[1]
            prop.phase = "accept"
            self._send_accept(cid, prop)

    def _on_accepted(self, cid, ballot, src):
        prop = self.props.get(cid)
        if prop is None or prop.ballot != ballot or prop.phase != "accept":
            return
        prop.accepts.add(src)
        if len(prop.accepts) >= self.majority:
            del self.props[cid]
            self.node.consensus_done(cid, prop.value)

    def state_key(self):
        return (tuple(sorted(self.promised.items())),
                tuple(sorted((c, repr(v)) for c, v in self.accepted.items())),
                tuple(sorted((c, p.ballot, p.phase, repr(p.value), tuple(sorted(p.promises)),
                              tuple(sorted(p.accepts))) for c, p in self.props.items())))
