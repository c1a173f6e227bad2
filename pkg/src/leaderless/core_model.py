"""Commands, the conflict relation and the per-process dependency store."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable

from .errors import ConflictingCommit, NotStable

# (submitter index, per-submitter sequence number); tuples compare lexicographically
CommandId = tuple


@dataclass(frozen=True)
class Command:
    id: CommandId
    key: Hashable
    payload: bytes = field(default=b"", compare=False)

    @property
    def submitter(self) -> int:
        return self.id[0]

    @property
    def seq(self) -> int:
        return self.id[1]


def conflicts(c: Command, d: Command) -> bool:
    return c.id != d.id and c.key == d.key


class _Abort:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "ABORT"

    def __reduce__(self):
        return (_Abort, ())


# deps value of an aborted command; an unset command has no entry (None)
ABORT = _Abort()


class Phase(Enum):
    PENDING = "pending"
    COMMIT = "commit"
    ABORT = "abort"
    STABLE = "stable"
    EXECUTE = "execute"


def fmt_id(cid) -> str:
    return f"p{cid[0] + 1}.{cid[1]}"


class DepsStore:
    """deps/phase mapping of one process.

    Besides the plain map the store keeps, for committed but not yet executed
    commands, the subset of their dependencies that are not executed either.
    Executed commands are stable, so walks can stop at them.
    """

    def __init__(self):
        self.deps: dict = {}
        self.executed: list[list] = []
        self._done: set = set()
        self._open: dict = {}  # committed, unexecuted id -> unexecuted deps
        self._users: dict = {}  # id -> committed unexecuted ids that depend on it

    # -- queries --------------------------------------------------------
    def value(self, c):
        return self.deps.get(c)

    def is_committed(self, c) -> bool:
        v = self.deps.get(c)
        return v is not None and v is not ABORT

    def is_decided(self, c) -> bool:
        return c in self.deps

    def is_executed(self, c) -> bool:
        return c in self._done

    def phase(self, c) -> Phase:
        v = self.deps.get(c)
        if v is None:
            return Phase.PENDING
        if v is ABORT:
            return Phase.ABORT
        if c in self._done:
            return Phase.EXECUTE
        return Phase.STABLE if self.is_stable(c) else Phase.COMMIT

    def transitive_deps(self, c) -> set:
        seen = {c}
        todo = [c]
        while todo:
            x = todo.pop()
            v = self.deps.get(x)
            if v is None or v is ABORT:
                continue
            for y in v:
                if y not in seen:
                    seen.add(y)
                    todo.append(y)
        return seen

    def is_stable(self, c) -> bool:
        if not self.is_committed(c):
            return False
        if c in self._done:
            return True
        seen = {c}
        todo = [c]
        while todo:
            x = todo.pop()
            for y in self._open.get(x, ()):
                if y in seen:
                    continue
                if not self.is_committed(y):
                    return False
                seen.add(y)
                todo.append(y)
        return True

    def exec_order_less(self, c, d) -> bool:
        if c == d:
            return False
        if c not in self.transitive_deps(d):
            return False
        return d not in self.transitive_deps(c) or c < d

    def pending_refs(self) -> set:
        """Ids referenced by some committed set but still undecided here."""
        return {x for x in self._users if x not in self.deps}

    # -- updates --------------------------------------------------------
    def commit(self, c, D: Iterable) -> frozenset:
        """Record deps(c)=D. Returns the ids dropped because two decisions
        for c disagreed (empty in the normal case)."""
        cur = self.deps.get(c)
        if cur is ABORT:
            raise ConflictingCommit(f"{fmt_id(c)} committed after abort")
        new = frozenset(x for x in D if x != c and self.deps.get(x) is not ABORT)
        if cur is None:
            self.deps[c] = new
            self._open[c] = {x for x in new if x not in self._done}
            for x in self._open[c]:
                self._users.setdefault(x, set()).add(c)
            return frozenset()
        if cur == new:
            return frozenset()
        diff = cur ^ new
        bad = [x for x in diff if self.is_committed(x)]
        if bad:
            raise ConflictingCommit(
                f"{fmt_id(c)}: {sorted(map(fmt_id, cur))} vs {sorted(map(fmt_id, new))}")
        # the disagreement only involves undecided ids; a correct protocol
        # aborts all of them, so keep what both decisions share
        keep = cur & new
        for x in cur - keep:
            self._unlink(c, x)
        self.deps[c] = keep
        return diff

    def abort(self, c) -> frozenset:
        """Record deps(c)=ABORT and prune c from every committed set.
        Returns the commands that referenced c."""
        cur = self.deps.get(c)
        if cur is ABORT:
            return frozenset()
        if cur is not None:
            raise ConflictingCommit(f"{fmt_id(c)} aborted after commit")
        self.deps[c] = ABORT
        users = frozenset(self._users.pop(c, ()))
        for d in users:
            self.deps[d] = self.deps[d] - {c}
            self._open[d].discard(c)
        return users

    def _unlink(self, c, x):
        self._open.get(c, set()).discard(x)
        users = self._users.get(x)
        if users is not None:
            users.discard(c)
            if not users:
                del self._users[x]

    def execute(self, c) -> list:
        if c in self._done or not self.is_stable(c):
            raise NotStable(f"{fmt_id(c)} is {self.phase(c).value}")
        # members reachable through unexecuted commands; all are stable
        batch = {c}
        todo = [c]
        while todo:
            x = todo.pop()
            for y in self._open[x]:
                if y not in batch:
                    batch.add(y)
                    todo.append(y)
        order = order_batch(batch, lambda x: self._open[x])
        for x in order:
            self._done.add(x)
            del self._open[x]
        for x in order:
            for u in self._users.pop(x, ()):
                if u in self._open:
                    self._open[u].discard(x)
        self.executed.append(order)
        return order

    def dependents_closure(self, roots: Iterable) -> set:
        """Unexecuted committed commands whose closure reaches some root."""
        seen = set()
        todo = list(roots)
        while todo:
            x = todo.pop()
            for u in self._users.get(x, ()):
                if u not in seen:
                    seen.add(u)
                    todo.append(u)
        return seen

    def execute_ready(self, touched: Iterable) -> list[list]:
        """Execute every command made stable by decisions on `touched`."""
        touched = list(touched)
        cand = self.dependents_closure(touched)
        cand.update(t for t in touched if t in self._open)
        out = []
        for x in sorted(cand):
            if x not in self._done and self.is_stable(x):
                out.append(self.execute(x))
        return out

    def snapshot(self) -> dict:
        return dict(self.deps)


def order_batch(batch: set, succ) -> list:
    """Smallest-id-first linearization of the execution order on `batch`.

    `succ(x)` yields the dependencies of x; only members of the batch matter.
    """
    reach = {}
    for x in batch:
        seen = {x}
        todo = [x]
        while todo:
            y = todo.pop()
            for z in succ(y):
                if z in batch and z not in seen:
                    seen.add(z)
                    todo.append(z)
        reach[x] = seen
    # before[y] = members that must precede y
    indeg = {x: 0 for x in batch}
    after = {x: [] for x in batch}
    for y in batch:
        for x in reach[y]:
            if x == y:
                continue
            if y not in reach[x] or x < y:
                after[x].append(y)
                indeg[y] += 1
    heap = [x for x in batch if indeg[x] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        x = heapq.heappop(heap)
        out.append(x)
        for y in after[x]:
            indeg[y] -= 1
            if indeg[y] == 0:
                heapq.heappush(heap, y)
    return out
