"""Size sweeps, best-implementation selection and reference overlays."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .compiler import (
    GB,
    KB,
    MB,
    SELECTION_TABLE,
    CollectiveKind,
    CollectiveSpec,
    compile_collective,
    implementations,
)
from .costmodel import CostModel
from .program import validate_program
from .sim import Timeline, simulate
from .topology import NodeTopology
from .verifier import verify_collective

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "impl",
    "collective",
    "gpus",
    "size_bytes",
    "total_ns",
    "control_ns",
    "schedule_ns",
    "copy_ns",
    "sync_ns",
    "trigger_ns",
]

DEGENERATE_REL = 1e-9


class SweepError(RuntimeError):
    pass


def binary_sizes(start: int = 1 * KB, end: int = 4 * GB, step: float = 2) -> list[int]:
    if start <= 0 or end < start:
        raise SweepError(f"bad size range {start}..{end}")
    if not step > 1:
        raise SweepError(f"size step must be > 1, got {step}")
    out, s = [], float(start)
    while s <= end * (1 + 1e-12):
        out.append(int(round(s)))
        s *= step
    return out


def parse_size(text: str) -> int:
    """Byte count with optional binary K/M/G suffix (1K = 1024)."""
    t = str(text).strip().upper().removesuffix("B")
    mult = {"K": KB, "M": MB, "G": GB}.get(t[-1:], 1)
    if mult != 1:
        t = t[:-1]
    try:
        val = float(t)
    except ValueError:
        raise SweepError(f"cannot parse size {text!r}") from None
    n = int(round(val * mult))
    if n <= 0 or abs(n - val * mult) > 1e-6:
        raise SweepError(f"size must be a positive whole number of bytes, got {text!r}")
    return n


def format_size(n: int) -> str:
    for unit, mult in (("G", GB), ("M", MB), ("K", KB)):
        if n >= mult and n % mult == 0:
            return f"{n // mult}{unit}"
    return str(n)


def simulate_point(
    kind: CollectiveKind, impl: str, size: int, topo: NodeTopology, cost: CostModel
) -> Timeline:
    spec = CollectiveSpec(CollectiveKind(kind), size, topo.gpu_count)
    return simulate(compile_collective(spec, impl, topo), topo, cost)


def best_implementation(times: dict[str, float], tie_tolerance: float = 0.0) -> str:
    """Fastest implementation, preferring one without prelaunch on near-ties.

    Prelaunch needs buffers and operator order known ahead of time; when a
    plain implementation is within ``tie_tolerance`` (relative) of the best
    it is chosen instead.
    """
    best = min(times.values())
    close = [i for i, t in times.items() if t <= best * (1 + tie_tolerance)]
    plain = [i for i in close if not i.startswith("prelaunch_")]
    pool = plain or close
    return min(pool, key=lambda i: (times[i], i))


def is_degenerate(times: dict[str, float]) -> bool:
    lo, hi = min(times.values()), max(times.values())
    return hi <= lo * (1 + DEGENERATE_REL)


def regimes(choices: Sequence[tuple[int, str]]) -> list[tuple[str, int]]:
    """Collapse (size, impl) rows into (impl, first size) runs."""
    out: list[tuple[str, int]] = []
    for size, impl in choices:
        if not out or out[-1][0] != impl:
            out.append((impl, size))
    return out


@dataclass
class BoundaryCheck:
    impl: str
    ref_size: int
    sim_size: Optional[int]

    @property
    def steps(self) -> float:
        if self.sim_size is None:
            return math.inf
        return abs(math.log2(self.sim_size / self.ref_size))


@dataclass
class RegimeComparison:
    reference: list[tuple[str, int]]
    simulated: list[tuple[str, int]]
    boundaries: list[BoundaryCheck]
    same_sequence: bool
    tolerance_steps: int = 1

    @property
    def ok(self) -> bool:
        return self.same_sequence and all(b.steps <= self.tolerance_steps for b in self.boundaries)

    def violation(self) -> float:
        """0 when ok; grows with structural mismatch and boundary distance."""
        v = 0.0
        if not self.same_sequence:
            v += 1.0 + abs(len(self.reference) - len(self.simulated))
        for b in self.boundaries:
            v += max(0.0, min(b.steps, 8.0) - self.tolerance_steps)
        return v


def compare_regimes(
    kind: CollectiveKind,
    choices: Sequence[tuple[int, str]],
    tolerance_steps: int = 1,
    table: Optional[Sequence[tuple[int, str]]] = None,
) -> RegimeComparison:
    if table is None:
        table = SELECTION_TABLE[CollectiveKind(kind)]
    reference = [(impl, lo) for lo, impl in table]
    sim = regimes(choices)
    same = [i for i, _ in sim] == [i for i, _ in reference]
    first_sim = {}
    for impl, size in sim:
        first_sim.setdefault(impl, size)
    checks = [BoundaryCheck(impl, lo, first_sim.get(impl)) for impl, lo in reference[1:]]
    return RegimeComparison(reference, sim, checks, same, tolerance_steps)


# -- sweep -----------------------------------------------------------------------


@dataclass
class SweepConfig:
    kind: CollectiveKind
    impls: list[str]
    topology: NodeTopology
    cost: CostModel
    start: int = 1 * KB
    end: int = 4 * GB
    step: float = 2
    seed: int = 0
    jobs: int = 1
    verify: bool = True
    windows: list[tuple[int, int]] = field(default_factory=lambda: [(1 * KB, 32 * MB)])

    def __post_init__(self) -> None:
        self.kind = CollectiveKind(self.kind)
        valid = implementations(self.kind)
        bad = [i for i in self.impls if i not in valid]
        if bad:
            raise SweepError(f"{bad} not valid for {self.kind.value}; choose from {valid}")
        if not self.impls:
            raise SweepError("no implementations selected")
        binary_sizes(self.start, self.end, self.step)

    @property
    def sizes(self) -> list[int]:
        return binary_sizes(self.start, self.end, self.step)


@dataclass
class SweepRow:
    impl: str
    collective: str
    gpus: int
    size_bytes: int
    total_ns: float
    control_ns: float
    schedule_ns: float
    copy_ns: float
    sync_ns: float
    trigger_ns: float

    def as_list(self) -> list[str]:
        return [str(getattr(self, c)) if not isinstance(getattr(self, c), float) else repr(getattr(self, c)) for c in CSV_COLUMNS]


def _point(args) -> SweepRow:
    kind, impl, size, topo, cost, seed, verify = args
    spec = CollectiveSpec(kind, size, topo.gpu_count)
    prog = compile_collective(spec, impl, topo)
    viol = validate_program(prog, topo)
    if viol is not None:
        raise SweepError(f"{impl} @ {size}: invalid program: {viol}")
    if verify:
        verdict = verify_collective(prog, seed=seed)
        if not verdict.ok:
            raise SweepError(f"{impl} @ {size}: verification failed: {verdict}")
    tl = simulate(prog, topo, cost)
    ph = tl.phase_totals()
    return SweepRow(
        impl, kind.value, topo.gpu_count, size, tl.total,
        ph["control"], ph["schedule"], ph["copy"], ph["sync"], ph["trigger"] + ph["poll"],
    )


@dataclass
class SweepResult:
    rows: list[SweepRow]
    summary: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_list())
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.csv_text())

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


def run_sweep(config: SweepConfig) -> SweepResult:
    """compile -> validate -> verify -> simulate for every (impl, size)."""
    tasks = [
        (config.kind, impl, size, config.topology, config.cost, config.seed, config.verify)
        for impl in config.impls
        for size in config.sizes
    ]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            rows = list(ex.map(_point, tasks, chunksize=4))
    else:
        rows = [_point(t) for t in tasks]
    return SweepResult(rows, summarize(rows, config.cost.selection_tie_tolerance, config.windows))


def geomean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return math.exp(sum(math.log(x) for x in xs) / len(xs)) if xs else math.nan


def summarize(rows: Sequence[SweepRow], tie_tolerance: float, windows: Sequence[tuple[int, int]]) -> dict:
    times: dict[int, dict[str, float]] = {}
    for r in rows:
        times.setdefault(r.size_bytes, {})[r.impl] = r.total_ns
    impls = sorted({r.impl for r in rows})
    best = {str(s): best_implementation(t, tie_tolerance) for s, t in sorted(times.items())}
    ratios = []
    for lo, hi in windows:
        sizes = [s for s in sorted(times) if lo <= s <= hi]
        for a in impls:
            for b in impls:
                if a == b:
                    continue
                vals = [times[s][b] / times[s][a] for s in sizes if a in times[s] and b in times[s]]
                if vals:
                    ratios.append({"window": [lo, hi], "speedup_of": a, "over": b, "geomean": geomean(vals)})
    return {"best_by_size": best, "geomean_speedups": ratios}


# -- selection table -------------------------------------------------------------


@dataclass
class SelectionTable:
    kind: CollectiveKind
    gpus: int
    rows: list[tuple[int, str, str]]  # size, simulated best, reference best
    comparison: RegimeComparison
    degenerate: bool

    @property
    def ok(self) -> bool:
        return not self.degenerate and self.comparison.ok

    def format(self) -> str:
        lines = [f"# best implementation, {self.kind.value}, {self.gpus} GPUs"]
        if self.degenerate:
            lines.append("# degenerate model: every implementation ties at every size")
        lines.append(f"{'size':>6}  {'simulated':<16} {'reference':<16} match")
        for size, sim, ref in self.rows:
            lines.append(f"{format_size(size):>6}  {sim:<16} {ref:<16} {'yes' if sim == ref else 'no'}")
        lines.append("")
        lines.append(f"{'implementation':<16} {'reference from':>14} {'simulated from':>14}  within 1 step")
        for b in self.comparison.boundaries:
            sim = format_size(b.sim_size) if b.sim_size else "-"
            lines.append(f"{b.impl:<16} {format_size(b.ref_size):>14} {sim:>14}  {'yes' if b.steps <= 1 else 'NO'}")
        if not self.comparison.same_sequence:
            lines.append("regime sequence differs: " + " -> ".join(i for i, _ in self.comparison.simulated))
        lines.append(f"verdict: {'MATCH' if self.ok else 'MISMATCH'}")
        return "\n".join(lines) + "\n"


def selection_table(
    kind: CollectiveKind,
    topo: NodeTopology,
    cost: CostModel,
    sizes: Optional[Sequence[int]] = None,
    impls: Optional[Sequence[str]] = None,
) -> SelectionTable:
    from .compiler import select_implementation

    kind = CollectiveKind(kind)
    sizes = list(sizes or binary_sizes())
    impls = list(impls or implementations(kind))
    rows, choices, degenerate = [], [], True
    for size in sizes:
        t = {i: simulate_point(kind, i, size, topo, cost).total for i in impls}
        degenerate &= is_degenerate(t)
        choice = best_implementation(t, cost.selection_tie_tolerance)
        choices.append((size, choice))
        rows.append((size, choice, select_implementation(kind, size)))
    return SelectionTable(kind, topo.gpu_count, rows, compare_regimes(kind, choices), degenerate)


# -- reference overlay -------------------------------------------------------------


@dataclass
class OverlayResult:
    rows: list[dict]
    problems: list[str]

    def csv_text(self) -> str:
        cols = ["impl", "collective", "size_bytes", "total_ns", "reference_ns", "ratio"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def _read_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def overlay_reference(sweep_csv: Union[str, Path], reference_csv: Union[str, Path]) -> OverlayResult:
    """Join simulated rows with user-supplied reference times on (collective, size).

    The reference needs ``collective``, ``size_bytes`` and ``total_ns``
    columns. ``ratio`` is simulated / reference.
    """
    sim = _read_csv(sweep_csv)
    ref = _read_csv(reference_csv)
    problems: list[str] = []
    if not ref:
        log.warning("reference %s is empty; nothing to join", reference_csv)
        return OverlayResult([], [f"reference {reference_csv} has no rows"])
    refmap: dict[tuple[str, int], float] = {}
    for i, r in enumerate(ref, 1):
        try:
            key = (r["collective"].strip().lower(), int(r["size_bytes"]))
            refmap[key] = float(r["total_ns"])
        except (KeyError, ValueError) as exc:
            problems.append(f"reference row {i}: unusable ({exc})")
    joined, used = [], set()
    for i, r in enumerate(sim, 1):
        key = (r["collective"].strip().lower(), int(r["size_bytes"]))
        if key not in refmap:
            problems.append(f"sweep row {i}: no reference for {key[0]} @ {key[1]} bytes")
            continue
        used.add(key)
        t, rt = float(r["total_ns"]), refmap[key]
        joined.append({
            "impl": r["impl"], "collective": key[0], "size_bytes": key[1],
            "total_ns": repr(t), "reference_ns": repr(rt), "ratio": repr(t / rt) if rt else "inf",
        })
    for key in sorted(set(refmap) - used):
        problems.append(f"reference {key[0]} @ {key[1]} bytes matches no sweep row")
    return OverlayResult(joined, problems)
