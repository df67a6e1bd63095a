import csv
import io
import logging
import math

import pytest

from dmacoll.compiler import GB, KB, MB, CollectiveKind
from dmacoll.costmodel import CostModel, default_cost_model
from dmacoll.sweep import (
    CSV_COLUMNS,
    SweepConfig,
    SweepError,
    best_implementation,
    binary_sizes,
    compare_regimes,
    format_size,
    overlay_reference,
    parse_size,
    regimes,
    run_sweep,
    selection_table,
)
from dmacoll.topology import build_topology
from dmacoll.verifier import Verdict

AG, AA = CollectiveKind.ALL_GATHER, CollectiveKind.ALL_TO_ALL
TOPO = build_topology(8)
DEF = default_cost_model()


def test_default_grid():
    sizes = binary_sizes()
    assert len(sizes) == 23 and sizes[0] == KB and sizes[-1] == 4 * GB


@pytest.mark.parametrize("text,n", [("4K", 4096), ("1M", MB), ("2G", 2 * GB), ("512", 512), ("1.5K", 1536), ("8kb", 8192)])
def test_parse_size(text, n):
    assert parse_size(text) == n


@pytest.mark.parametrize("text", ["", "K", "-1K", "0", "1.1", "abc"])
def test_parse_size_rejects(text):
    with pytest.raises(SweepError):
        parse_size(text)


def test_format_size():
    assert [format_size(s) for s in (KB, 3 * MB, 4 * GB, 1000)] == ["1K", "3M", "4G", "1000"]


def test_tie_rule_prefers_plain():
    t = {"prelaunch_pcpy": 100.0, "pcpy": 100.3, "b2b": 500.0}
    assert best_implementation(t, 0.0) == "prelaunch_pcpy"
    assert best_implementation(t, 0.005) == "pcpy"
    assert best_implementation({"prelaunch_b2b": 10.0, "prelaunch_bcst": 10.0}, 0.0) == "prelaunch_b2b"


def test_regimes_and_comparison():
    choices = [(KB, "a"), (2 * KB, "a"), (4 * KB, "b"), (8 * KB, "b")]
    assert regimes(choices) == [("a", KB), ("b", 4 * KB)]
    cmp = compare_regimes(AG, choices, table=[(KB, "a"), (8 * KB, "b")])
    assert cmp.same_sequence and cmp.boundaries[0].steps == 1 and cmp.ok
    far = compare_regimes(AG, choices, table=[(KB, "a"), (16 * KB, "b")])
    assert not far.ok and far.violation() == pytest.approx(1.0)
    wrong = compare_regimes(AG, choices, table=[(KB, "b"), (8 * KB, "a")])
    assert not wrong.same_sequence and wrong.violation() > 0


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind=AA, impls=["bcst"]),
        dict(kind=AG, impls=["swap"]),
        dict(kind=AG, impls=[]),
        dict(kind=AG, impls=["pcpy"], step=1.0),
        dict(kind=AG, impls=["pcpy"], start=4 * KB, end=KB),
    ],
)
def test_bad_config(kw):
    with pytest.raises(SweepError):
        SweepConfig(topology=TOPO, cost=DEF, **kw)


def test_single_point_sweep():
    res = run_sweep(SweepConfig(AG, ["pcpy"], TOPO, DEF, start=64 * KB, end=64 * KB))
    rows = list(csv.reader(io.StringIO(res.csv_text())))
    assert rows[0] == CSV_COLUMNS and len(rows) == 2
    assert rows[1][:4] == ["pcpy", "allgather", "8", str(64 * KB)]
    vals = [float(x) for x in rows[1][4:]]
    assert vals[0] == pytest.approx(sum(vals[1:]))


def test_sweep_is_reproducible_and_job_independent():
    cfg = dict(kind=AA, impls=["prelaunch_swap", "b2b"], topology=TOPO, cost=DEF, start=KB, end=MB, step=4)
    a = run_sweep(SweepConfig(**cfg)).csv_text()
    b = run_sweep(SweepConfig(**cfg)).csv_text()
    c = run_sweep(SweepConfig(**cfg, jobs=2)).csv_text()
    assert a == b == c


def test_verification_failure_aborts(monkeypatch):
    import dmacoll.sweep as sw

    monkeypatch.setattr(sw, "verify_collective", lambda prog, seed=0: Verdict("hazard", "forced"))
    with pytest.raises(SweepError, match="forced"):
        run_sweep(SweepConfig(AG, ["pcpy"], TOPO, DEF, start=KB, end=KB))


def test_summary_geomeans():
    res = run_sweep(SweepConfig(AG, ["pcpy", "prelaunch_pcpy"], TOPO, DEF, start=KB, end=4 * KB, windows=[(KB, 4 * KB)]))
    t = {(r.impl, r.size_bytes): r.total_ns for r in res.rows}
    want = math.prod(t[("pcpy", s)] / t[("prelaunch_pcpy", s)] for s in (KB, 2 * KB, 4 * KB)) ** (1 / 3)
    got = [g for g in res.summary["geomean_speedups"] if g["speedup_of"] == "prelaunch_pcpy"][0]
    assert got["over"] == "pcpy" and got["geomean"] == pytest.approx(want, rel=1e-12)
    assert set(res.summary["best_by_size"].values()) == {"prelaunch_pcpy"}


def test_allgather_restricted_candidates_match_table():
    impls = ["prelaunch_b2b", "prelaunch_bcst", "prelaunch_pcpy", "pcpy"]
    res = run_sweep(SweepConfig(AG, impls, TOPO, DEF, verify=False))
    choices = [(int(s), i) for s, i in res.summary["best_by_size"].items()]
    assert compare_regimes(AG, sorted(choices)).ok


def test_selection_tables_match_with_defaults():
    for kind in (AG, AA):
        table = selection_table(kind, TOPO, DEF)
        assert table.ok and not table.degenerate
        assert "verdict: MATCH" in table.format()


def test_zero_model_is_degenerate():
    table = selection_table(AG, TOPO, CostModel(), sizes=[KB, MB, GB])
    assert table.degenerate and not table.ok
    assert "degenerate model" in table.format()


def _write(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for r in rows:
            w.writerow(r)
    return path


def test_overlay_with_itself(tmp_path):
    res = run_sweep(SweepConfig(AG, ["pcpy", "b2b"], TOPO, DEF, start=KB, end=8 * KB, verify=False))
    p = tmp_path / "s.csv"
    res.write_csv(p)
    ov = overlay_reference(p, p)
    assert len(ov.rows) == 8
    assert all(float(r["ratio"]) == 1.0 for r in ov.rows if r["impl"] == "b2b")


def test_overlay_with_empty_reference(tmp_path, caplog):
    res = run_sweep(SweepConfig(AG, ["pcpy"], TOPO, DEF, start=KB, end=KB, verify=False))
    p = tmp_path / "s.csv"
    res.write_csv(p)
    ref = _write(tmp_path / "r.csv", [["collective", "size_bytes", "total_ns"]])
    with caplog.at_level(logging.WARNING):
        ov = overlay_reference(p, ref)
    assert ov.rows == [] and "empty" in caplog.text
    assert ov.csv_text().splitlines() == ["impl,collective,size_bytes,total_ns,reference_ns,ratio"]


def test_overlay_two_row_reference(tmp_path):
    res = run_sweep(SweepConfig(AG, ["pcpy"], TOPO, DEF, start=KB, end=4 * KB, verify=False))
    p = tmp_path / "s.csv"
    res.write_csv(p)
    ref = _write(tmp_path / "r.csv", [
        ["collective", "size_bytes", "total_ns"],
        ["allgather", KB, 1000.0],
        ["allgather", 2 * KB, 2000.0],
        ["alltoall", KB, 5.0],
    ])
    ov = overlay_reference(p, ref)
    assert [r["size_bytes"] for r in ov.rows] == [KB, 2 * KB]
    t1 = [r.total_ns for r in res.rows if r.size_bytes == KB][0]
    assert float(ov.rows[0]["ratio"]) == pytest.approx(t1 / 1000.0)
    assert any("4096" in m for m in ov.problems)
    assert any("alltoall" in m for m in ov.problems)
