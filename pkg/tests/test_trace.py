import json

from dmacoll.compiler import KB, CollectiveKind, CollectiveSpec, compile_collective
from dmacoll.costmodel import default_cost_model
from dmacoll.sim import simulate
from dmacoll.topology import build_topology
from dmacoll.trace import trace_events, write_trace


def _tl(impl="prelaunch_b2b", n=4):
    topo = build_topology(n)
    prog = compile_collective(CollectiveSpec(CollectiveKind.ALL_GATHER, 4 * KB, n), impl, topo)
    return simulate(prog, topo, default_cost_model())


def test_event_shape(tmp_path):
    tl = _tl()
    p = tmp_path / "t.json"
    write_trace(tl, p)
    evs = json.loads(p.read_text())
    assert evs == trace_events(tl)
    assert {e["ph"] for e in evs} == {"B", "E"}
    for e in evs:
        assert {"name", "ph", "ts", "pid", "tid"} <= set(e)
    assert {e["pid"] for e in evs} == {0, 1, 2, 3, 4}
    host = [e for e in evs if e["pid"] == 4]
    assert any(e["cat"] == "trigger" for e in host)
    assert min(e["ts"] for e in evs) < 0  # prelaunch preparation


def test_pairs_balance_and_order():
    evs = trace_events(_tl("pcpy"))
    assert all(a["ts"] <= b["ts"] for a, b in zip(evs, evs[1:]))
    depth = {}
    for e in evs:
        key = (e["pid"], e["tid"], e["name"])
        depth[key] = depth.get(key, 0) + (1 if e["ph"] == "B" else -1)
        assert depth[key] >= 0
    assert set(depth.values()) == {0}


def test_engine_tids():
    evs = trace_events(_tl("pcpy"))
    assert {e["tid"] for e in evs if e["pid"] == 0} == {0, 1, 2}
