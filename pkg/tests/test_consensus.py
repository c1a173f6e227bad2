from itertools import permutations

from hypothesis import given, settings, strategies as st

from leaderless.consensus import Oracle
from leaderless.core_model import ABORT
from leaderless.protocol_engine import default_config
from leaderless.simulation import UniformDelay, random_scenario, run

D = (1, 0)
C = (0, 0)


def test_oracle_single_proposal():
    assert Oracle().propose(C, frozenset({D}), 0) == frozenset({D})


def test_oracle_both_schedules_agree():
    # enumerate both orders of two concurrent proposals
    for order in permutations([(0, frozenset({D})), (1, ABORT)]):
        o = Oracle()
        got = [o.propose(C, v, p) for p, v in order]
        assert got[0] == got[1] == order[0][1]


def test_oracle_after_decision():
    o = Oracle()
    o.propose(C, frozenset(), 0)
    assert o.propose(C, ABORT, 1) == frozenset()
    assert o.decided(C) == frozenset()


def decisions(trace):
    out = {}
    for s in trace.steps:
        if s.delta and s.delta["op"] == "decided":
            out.setdefault(s.delta["cmd"], set()).add(repr(s.delta["value"]))
    return out


def test_paxos_recovery_contention_agrees():
    # both survivors recover the crashed coordinator's command at once
    cfg = default_config(5, "epaxos", "quorum")
    for seed in range(20):
        t = run(cfg, [(0, 0, 42), (1, 1, 42)], seed=seed, delays=UniformDelay(1, 10),
                crashes={0: 1}, fd_timeout=5)
        for cid, vals in decisions(t).items():
            assert len(vals) == 1, (seed, cid, vals)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000).map(lambda s: 2 * s + 1))
def test_paxos_agreement_random(seed):
    # odd seeds run with quorum consensus
    t = run(**random_scenario(seed))
    for cid, vals in decisions(t).items():
        assert len(vals) == 1
