import os

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from leaderless.analysis import (CausalPath, asynchrony_degree, cdf, command_stats, contended,
                                 correlation, find_live_chains, latency_of, latency_stats,
                                 max_live_chain, message_table, percentile, write_csvs)
from leaderless.protocol_engine import SystemConfig, default_config
from leaderless.simulation import ConstantDelay, Step, Trace, example_graph_trace, run

A, C, D, B = (0, 0), (1, 0), (1, 1), (1, 2)


def events_trace(n, events):
    """Trace made only of Send/Recv steps from (kind, process, msg, peer)."""
    steps = []
    for i, (kind, p, m, peer) in enumerate(events):
        if kind == "send":
            steps.append(Step(i, i, "Send", p, "ep.req", msg=m, sender=p, dest=peer))
        else:
            steps.append(Step(i, i, "Recv", p, "ep.req", msg=m, sender=peer, dest=p))
    return Trace(SystemConfig(n, 0, 0), steps, [])


# causal paths

def test_latency_of():
    assert latency_of([("send", 0), ("recv", 1)]) == 1
    assert latency_of([("send", 0), ("recv", 1), ("local", 1), ("send", 1), ("recv", 0)]) == 2
    assert latency_of([("local", 0), ("local", 0)]) == 0
    assert latency_of(CausalPath([3, 4])) == 2


# asynchrony degree

OVERLAP = [("send", 4, "red", 3), ("send", 0, "blue", 1), ("recv", 1, "blue", 0),
        ("send", 1, "green", 3), ("recv", 3, "green", 1), ("recv", 3, "red", 4)]


@pytest.mark.parametrize("order", ["realtime", "causal"])
def test_overlap_pattern(order):
    t = events_trace(5, OVERLAP)
    assert asynchrony_degree(t, order=order) == 2
    assert oracles.asynchrony_degree(OVERLAP, order) == 2


def lockstep(n, rounds):
    ev = []
    for r in range(rounds):
        msgs = [(p, q, f"{r}:{p}>{q}") for p in range(n) for q in range(n) if p != q]
        ev += [("send", p, m, q) for p, q, m in msgs]
        ev += [("recv", q, m, p) for p, q, m in msgs]
    return ev


def test_lockstep_rounds():
    ev = lockstep(3, 3)
    assert asynchrony_degree(events_trace(3, ev)) == 1
    # under happens-before a round-2 message is concurrent with a round-1
    # message and the round-3 message it leads to (value from the oracle)
    assert asynchrony_degree(events_trace(3, ev), order="causal") == 3
    assert oracles.asynchrony_degree(ev, "causal") == 3


def test_single_message():
    t = events_trace(2, [("send", 0, "m", 1), ("recv", 1, "m", 0)])
    assert asynchrony_degree(t) == 1
    assert asynchrony_degree(events_trace(2, [])) == 0


def test_realtime_is_stricter_than_causal():
    # p3's message is causally unrelated to the path but entirely earlier in time
    ev = [("send", 2, "x", 3), ("recv", 3, "x", 2),
          ("send", 0, "a", 1), ("recv", 1, "a", 0), ("send", 1, "b", 0), ("recv", 0, "b", 1)]
    t = events_trace(4, ev)
    assert asynchrony_degree(t, order="causal") == 2
    assert asynchrony_degree(t, order="realtime") == 1
    assert oracles.asynchrony_degree(ev, "causal") == 2
    assert oracles.asynchrony_degree(ev, "realtime") == 1


@st.composite
def message_runs(draw):
    n = draw(st.integers(2, 4))
    ev = []
    pending = []
    count = draw(st.integers(1, 7))
    sent = 0
    while sent < count or pending:
        recv = pending and (sent >= count or draw(st.booleans()))
        if recv:
            m = pending.pop(draw(st.integers(0, len(pending) - 1)))
            if draw(st.integers(0, 9)) == 0:
                continue  # this one is never received
            ev.append(("recv", m[2], m[0], m[1]))
        else:
            p = draw(st.integers(0, n - 1))
            q = draw(st.integers(0, n - 2))
            q = q + 1 if q >= p else q
            m = f"m{sent}"
            sent += 1
            ev.append(("send", p, m, q))
            pending.append((m, p, q))
    return n, ev


@settings(max_examples=300, deadline=None)
@given(message_runs(), st.sampled_from(["realtime", "causal"]))
def test_degree_matches_oracle(run_, order):
    n, ev = run_
    assert asynchrony_degree(events_trace(n, ev), order=order) == \
        oracles.asynchrony_degree(ev, order)


def test_message_table_filter():
    t = run(default_config(3), [(0, 0, 42)], delays=ConstantDelay(1))
    all_ = message_table(t)
    dds = message_table(t, only=lambda s: s.tag.startswith("ep."))
    # one request and one reply inside the quorum, then two decisions
    assert len(dds) == 2 and len(all_) == 4


def test_unknown_order():
    with pytest.raises(ValueError):
        asynchrony_degree(events_trace(2, [("send", 0, "m", 1)]), order="vector")


# live chains

def test_example_graph_live_chain():
    chains = find_live_chains(example_graph_trace())
    assert chains[0].commands == [A, B, D]
    assert all(p in (0, 1) for p, _ in chains[0].witness)
    assert max(len(c) for c in chains) == 3


def test_example_graph_c_chain_not_live():
    chains = find_live_chains(example_graph_trace())
    assert not any(c.commands[-1] == C for c in chains)


def test_no_live_chain_when_all_executed():
    assert find_live_chains(example_graph_trace(complete=True)) == []
    assert max_live_chain(example_graph_trace(complete=True)) == 0


def test_live_chain_at_time():
    t = example_graph_trace()
    # before any decision there are no links, so each pending command is a chain of one
    assert max_live_chain(t, at=0) == 1
    assert max_live_chain(t) == 3


# contention

def test_contended_solo():
    t = run(default_config(3), [(0, 0, 42)], delays=ConstantDelay(1))
    assert not contended(t, (0, 0))


def test_contended_concurrent():
    t = run(default_config(3), [(0, 1, 42), (0, 0, 42)], delays=ConstantDelay(1))
    assert contended(t, (0, 0)) or contended(t, (1, 0))


def test_not_contended_when_serialized():
    t = run(default_config(3), [(0, 1, 42), (20, 0, 42)], delays=ConstantDelay(1))
    assert not contended(t, (0, 0))


# latency statistics

def test_single_command_latency():
    t = run(default_config(5), [(0, 0, 42)], delays=ConstantDelay(1))
    (cs,) = command_stats(t)
    assert (cs.commit, cs.batch_size, cs.execute_local, cs.execute) == (2, 1, 2, 3)


def test_empty_trace_stats():
    t = run(default_config(3), [], delays=ConstantDelay(1))
    st_ = latency_stats(t)
    assert st_.commands == [] and st_.cdf == [] and st_.correlation is None


def test_cdf_and_percentile():
    assert cdf([3, 1, 2, 2]) == [(1, 0.25), (2, 0.75), (3, 1.0)]
    assert percentile([1, 2, 3, 4], 50) == 2
    assert percentile([1, 2, 3, 4], 99) == 4
    assert percentile([], 50) is None


def test_correlation():
    assert correlation([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert correlation([1, 1, 1], [1, 2, 3]) is None
    assert correlation([1], [1]) is None


def test_write_csvs(tmp_path):
    t = run(default_config(3), [(0, 0, 42), (5, 1, 42)], delays=ConstantDelay(1))
    write_csvs(t, tmp_path, chain_points=[(0, 1)])
    assert sorted(os.listdir(tmp_path)) == ["cdf.csv", "chains.csv", "commands.csv"]
    rows = (tmp_path / "commands.csv").read_text().splitlines()
    assert rows[0] == "id,submit,commit,execute,client_execute,batch_size"
    assert len(rows) == 3
