import math

import pytest
from hypothesis import given, strategies as st

from dmacoll import program as P
from dmacoll.compiler import KB, MB, CollectiveKind, CollectiveSpec, compile_collective, implementations
from dmacoll.costmodel import (
    ZERO,
    CostModel,
    CostModelError,
    copy_duration,
    default_config_header,
    default_cost_model,
    load_cost_model,
    parse_cost_model,
)
from dmacoll.flows import max_min_rates
from dmacoll.program import BufferRef, CommandProgram, CommandQueue
from dmacoll.sim import simulate
from dmacoll.topology import EngineId, build_topology

from oracles import progressive_filling


def cp(size):
    return P.copy(BufferRef(0, "a", 0, size), BufferRef(1, "b", 0, size))


def test_copy_two_megabytes():
    assert copy_duration(cp(2 * MB), 64e9) == pytest.approx(32768.0, rel=1e-12)


def test_copy_zero_bytes_rejected():
    with pytest.raises(CostModelError):
        copy_duration(cp(0), 64e9)


@pytest.mark.parametrize("rate", [0.0, -5.0])
def test_bad_rate_rejected(rate):
    with pytest.raises(CostModelError):
        copy_duration(cp(KB), rate)


def test_signal_has_no_copy_duration():
    with pytest.raises(CostModelError):
        copy_duration(P.signal(0), 64e9)


def test_broadcast_share_against_oracle():
    flows = [("L01", "E"), ("L02", "E")]
    caps = {"L01": 64e9, "L02": 64e9, "E": 96e9}
    rates = max_min_rates(flows, caps)
    assert rates == [48e9, 48e9]
    assert [float(r) for r in progressive_filling(flows, caps)] == rates
    b = P.broadcast(BufferRef(0, "a", 0, MB), BufferRef(1, "b", 0, MB), BufferRef(2, "b", 0, MB))
    fixed = 700.0
    want = fixed + MB / 48e9 * 1e9
    assert copy_duration(b, rates[0], CostModel(t_copy_fixed=fixed)) == pytest.approx(want, rel=1e-12)
    assert want == pytest.approx(fixed + 21845.33, abs=0.01)

    # the simulator reaches the same duration for a lone broadcast
    topo = build_topology(3)
    q = CommandQueue(EngineId(0, 0), (b, P.signal(0)))
    prog = CommandProgram((q,), frozenset({0}), ((0, "a", MB), (1, "b", MB), (2, "b", MB)))
    tl = simulate(prog, topo, CostModel(t_copy_fixed=fixed, engine_throughput_cap=96e9))
    rec = tl.records[0]
    assert rec.exec[1] - rec.fetch[1] == pytest.approx(want, rel=1e-12)


@given(st.integers(1, 2**32), st.integers(1, 2**32), st.floats(1e6, 1e12), st.floats(0, 1e4))
def test_copy_duration_monotone(a, b, rate, fixed):
    c = CostModel(t_copy_fixed=fixed)
    lo, hi = sorted((a, b))
    if lo < hi:
        assert copy_duration(cp(lo), rate, c) < copy_duration(cp(hi), rate, c)
    assert copy_duration(cp(a), rate, c) > copy_duration(cp(a), rate * 1.5, c)


_nonneg = st.floats(0, 1e7, allow_nan=False)


@given(st.lists(_nonneg, min_size=11, max_size=11), st.floats(1.0, 1e13), st.floats(0, 1))
def test_config_round_trip_bit_exact(ts, cap, eps):
    names = ["t_ctl", "t_db", "t_fetch", "t_copy_fixed", "t_sig", "t_obs", "t_scan",
             "t_trig", "t_poll_lat", "t_stream_sig", "t_host_fwd"]
    c = CostModel(**dict(zip(names, ts)), engine_throughput_cap=cap, selection_tie_tolerance=eps)
    back = parse_cost_model(c.dumps("header line"))
    assert back == c
    assert all(getattr(back, n).hex() == getattr(c, n).hex() for n in names)


def test_infinite_cap_round_trips():
    assert parse_cost_model(ZERO.dumps()) == ZERO


@pytest.mark.parametrize(
    "text",
    ["t_ctl_ns = -1\n", "t_bogus_ns = 3\n", "t_db_ns = fast\n", "engine_throughput_cap_bytes_per_s = 0\n"],
)
def test_bad_config(text):
    with pytest.raises(CostModelError):
        parse_cost_model(text)


def test_engine_cap_must_cover_a_link():
    with pytest.raises(CostModelError):
        CostModel(engine_throughput_cap=32e9).check_against(64e9)
    CostModel(engine_throughput_cap=64e9).check_against(64e9)


def test_observation_rule():
    c = CostModel(t_obs=100, t_scan=7)
    assert c.observation_time(0) == 0
    assert c.observation_time(1) == 100
    assert c.observation_time(56) == 100 + 55 * 7


def test_packaged_defaults():
    c = default_cost_model()
    assert c == load_cost_model(None)
    assert all(v > 0 for v in c.to_config().values())
    c.check_against(64e9)
    header = default_config_header()
    assert "seed = 0" in header and "satisfied = True" in header


def test_load_from_path(tmp_path):
    p = tmp_path / "c.cfg"
    CostModel(t_ctl=5).save(p, "x")
    assert load_cost_model(p).t_ctl == 5


@pytest.mark.parametrize("n", [2, 3, 8])
@pytest.mark.parametrize("kind", list(CollectiveKind))
def test_fluid_limit(n, kind):
    topo = build_topology(n)
    # a swap engine drives both directions, so two flows must fit even at n=2
    cost = CostModel(engine_throughput_cap=max(n - 1, 2) * topo.link_bandwidth)
    s = 3 * MB
    for impl in implementations(kind):
        tl = simulate(compile_collective(CollectiveSpec(kind, s, n), impl, topo), topo, cost)
        assert tl.total == pytest.approx(s / topo.link_bandwidth * 1e9, rel=1e-9), impl
