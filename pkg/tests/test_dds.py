from itertools import product

import pytest
from hypothesis import given, settings, strategies as st

from leaderless.core_model import ABORT
from leaderless.dds import (epaxos_outcome, epaxos_recovery_outcome, lower_slots,
                            mencius_outcome, recovery_threshold, rotating_outcome, slot)
from leaderless.errors import InsufficientQuorum
from leaderless.protocol_engine import SystemConfig, default_config
from leaderless.simulation import ConstantDelay, Engine, random_scenario, run
from leaderless.verification import check_dds_properties

D = (1, 0)


def outcomes(trace, purpose="submit"):
    return {s.delta["cmd"]: (s.delta["deps"], s.delta["fast"]) for s in trace.steps
            if s.delta and s.delta["op"] == "outcome" and s.delta["purpose"] == purpose}


def brute_lower(cid, n):
    return {(q, r) for q in range(n) for r in range(cid[1] + 1) if slot((q, r)) < slot(cid)}


# rotating coordinator

def test_rotating_first_command():
    assert rotating_outcome((0, 0), 3) == (frozenset(), False)


def test_rotating_depends_on_prior_slot():
    # c in round 2 at p1, d in round 1 at p2: d's slot is earlier
    c = (0, 2)
    out = rotating_outcome(c, 2)
    assert (1, 1) in out.deps and not out.fast


@pytest.mark.parametrize("n", [2, 3, 5])
def test_lower_slots_match_enumeration(n):
    for cid in product(range(n), range(4)):
        assert set(lower_slots(cid, n)) == brute_lower(cid, n)


def test_rotating_recovery_aborts():
    cfg = SystemConfig(3, 2, 1, "rotating")
    eng = Engine(cfg)
    eng.timed = False
    rep = eng.replicas[1]
    rep.suspected.add(0)
    rep.recover((0, 0))
    assert rep.store.value((0, 0)) is ABORT


# Mencius

def test_mencius_nice_run_is_fast():
    cfg = default_config(3, "mencius")
    t = run(cfg, [(0, 0, 42), (10, 1, 42)], delays=ConstantDelay(1))
    out = outcomes(t)
    assert out[(0, 0)] == (frozenset(), True)
    # p2's round-0 slot comes after p1's round-0 slot
    assert out[(1, 0)] == (frozenset({(0, 0)}), True)


def test_mencius_silent_peer_is_slow():
    cfg = default_config(3, "mencius")
    t = run(cfg, [(20, 0, 42)], delays=ConstantDelay(1), crashes={2: 0}, fd_timeout=5)
    deps, fast = outcomes(t)[(0, 0)]
    assert not fast


def test_mencius_outcome_drops_bailed():
    out = mencius_outcome((0, 1), 3, [(1, 0)], True)
    assert out == (frozenset({(0, 0), (2, 0)}), True)


# EPaxos

def test_epaxos_outcome_equal_sets():
    assert epaxos_outcome([set(), set(), set()]) == (frozenset(), True)


def test_epaxos_outcome_union():
    assert epaxos_outcome([{D}, {D}, set()]) == (frozenset({D}), False)


def test_epaxos_solo_command_fast():
    t = run(default_config(5), [(0, 0, 42)], delays=ConstantDelay(1))
    assert outcomes(t)[(0, 0)] == (frozenset(), True)


def test_recovery_threshold():
    assert [recovery_threshold(f) for f in range(5)] == [1, 1, 2, 2, 3]


def test_epaxos_recovery_threshold_wins():
    rs = [("known", {D}), ("known", {D}), ("known", set())]
    assert epaxos_recovery_outcome(rs, 5, 2) == (frozenset({D}), False)


def test_epaxos_recovery_nobody_knows():
    assert epaxos_recovery_outcome([None, None, None], 5, 2) == (ABORT, False)


def test_epaxos_recovery_single_knower():
    assert epaxos_recovery_outcome([("known", {D}), None, None], 5, 2) == (frozenset({D}), False)


def test_epaxos_recovery_decided_value_first():
    rs = [None, ("decided", ABORT), ("known", {D})]
    assert epaxos_recovery_outcome(rs, 5, 2) == (ABORT, False)


def test_epaxos_recovery_needs_majority():
    with pytest.raises(InsufficientQuorum):
        epaxos_recovery_outcome([None, None], 5, 2)


def test_epaxos_concurrent_conflicts_visible():
    # two conflicting commands whose quorums overlap in one process
    cfg = default_config(5)
    t = run(cfg, [(0, 0, 42), (0, 4, 42)], delays=ConstantDelay(1),
            quorums={(0, 0): {0, 1, 2}, (4, 0): {2, 3, 4}})
    out = outcomes(t)
    a, b = out[(0, 0)][0], out[(4, 0)][0]
    assert (4, 0) in a or (0, 0) in b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["rotating", "mencius", "epaxos"]))
def test_dds_properties_random_runs(seed, proto):
    sc = random_scenario(seed, protocol=proto)
    t = run(**sc)
    for v in check_dds_properties(t):
        assert v.ok, v
