"""Deterministic discrete-event simulation of a command program.

The host is one serial resource: it creates every command (control), rings
one doorbell per queue (schedule) and finally observes the completion
signals. Engines fetch their commands one after another and run data
commands as fluid flows; back-to-back copies on one engine overlap. Flow
rates are the max-min fair share under per-link and per-engine caps and are
recomputed only when a flow arrives or departs, and only for the connected
group of flows that shares a resource with it.

Prelaunched programs do their control/schedule work at negative times; the
time origin is the first trigger write.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Optional

from .costmodel import CostModel
from .flows import max_min_rates
from .program import CommandKind, CommandProgram
from .topology import EngineId, LinkId, NodeTopology

PHASES = ("control", "schedule", "copy", "sync", "trigger", "poll", "kernel")
_EPS = 1e-9  # ns


class SimulationError(RuntimeError):
    pass


class SimulationDeadlock(SimulationError):
    """A poll waits on a trigger slot the host never writes."""


@dataclass
class FlowRecord:
    link: Optional[LinkId]
    start: float
    end: float
    nbytes: int
    delivered: float = 0.0


@dataclass
class CommandRecord:
    queue: int
    ordinal: int
    kind: CommandKind
    fetch: Optional[tuple[float, float]]
    exec: tuple[float, float]
    flows: list[FlowRecord] = field(default_factory=list)


@dataclass
class Segment:
    phase: str
    start: float
    end: float
    label: str = ""

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Event:
    time: float
    entity: str
    phase: str
    ref: str
    kind: str  # "start" | "end"


@dataclass
class SyncChainInfo:
    gemm_ns: float
    standalone_ns: float
    end_to_end_ns: float
    overhead_ns: float


@dataclass
class Timeline:
    program: str
    gpu_count: int
    start: float
    end: float
    engines: list[EngineId]
    releases: list[float]
    host: list[Segment]
    records: list[CommandRecord]
    critical_path: list[Segment]
    signal_count: int
    prelaunched: bool
    sync_chain: Optional[SyncChainInfo] = None

    @property
    def total(self) -> float:
        return self.end - self.start

    def phase_totals(self) -> dict[str, float]:
        out = {p: 0.0 for p in PHASES}
        for seg in self.critical_path:
            out[seg.phase] += seg.duration
        return out

    @property
    def delivered_bytes(self) -> float:
        return sum(f.delivered for r in self.records for f in r.flows)

    @property
    def scheduled_bytes(self) -> int:
        return sum(f.nbytes for r in self.records for f in r.flows)

    @property
    def events(self) -> list[Event]:
        evs: list[tuple[float, int, Event]] = []

        def add(t0, t1, entity, phase, ref):
            evs.append((t0, len(evs), Event(t0, entity, phase, ref, "start")))
            evs.append((t1, len(evs), Event(t1, entity, phase, ref, "end")))

        for seg in self.host:
            add(seg.start, seg.end, "host", seg.phase, seg.label)
        for rec in self.records:
            eng = self.engines[rec.queue]
            ref = f"{eng}#{rec.ordinal}"
            if rec.fetch is not None and rec.fetch[1] > rec.fetch[0]:
                add(rec.fetch[0], rec.fetch[1], f"engine:{eng}", "schedule", ref)
            phase = _exec_phase(rec.kind)
            if phase:
                add(rec.exec[0], rec.exec[1], f"engine:{eng}", phase, ref)
            for fl in rec.flows:
                if fl.link is not None:
                    add(fl.start, fl.end, f"link:{fl.link}", "copy", ref)
            if rec.kind is CommandKind.ATOMIC_SIGNAL:
                evs.append((rec.exec[1], len(evs), Event(rec.exec[1], "signal", "sync", ref, "end")))
        evs.sort(key=lambda e: (e[0], e[1]))
        return [e for _, _, e in evs]


def _exec_phase(kind: CommandKind) -> Optional[str]:
    if kind.moves_data:
        return "copy"
    if kind is CommandKind.ATOMIC_SIGNAL:
        return "sync"
    if kind is CommandKind.POLL:
        return "poll"
    return None


RateObserver = Callable[[float, list, dict, list], None]


class _FlowState:
    __slots__ = ("cmd", "resources", "remaining", "rate", "last", "version", "record")

    def __init__(self, cmd, resources, nbytes, record):
        self.cmd = cmd
        self.resources = resources
        self.remaining = float(nbytes)
        self.rate = 0.0
        self.last = 0.0
        self.version = 0
        self.record = record


def simulate(
    program: CommandProgram,
    topo: NodeTopology,
    cost: CostModel,
    *,
    origin: float = 0.0,
    triggered_slots: Optional[set[int]] = None,
    observer: Optional[RateObserver] = None,
) -> Timeline:
    """Execute ``program`` and return its phase-attributed timeline.

    ``origin`` delays the host's first critical-path action (used by the
    producer sync chain). ``observer`` is called on every rate
    recomputation with ``(time, flow resources, capacities, rates)``.
    """
    b_engine = topo.engine_throughput_cap or cost.engine_throughput_cap
    link_cap = topo.link_bandwidth * 1e-9  # bytes/ns
    engine_cap = b_engine * 1e-9

    queues = [q for q in program.queues if q.commands]
    nq = len(queues)
    engines = [q.engine for q in queues]
    host: list[Segment] = []
    pre = program.prelaunched
    if triggered_slots is None:
        triggered_slots = set(program.trigger_slots)

    # host: control then doorbells, serialized in emission order
    n_cmds = sum(len(q.commands) for q in queues)
    doorbells = sum(q.doorbell_count for q in queues)
    prep = n_cmds * cost.t_ctl + doorbells * cost.t_db
    t = origin - (prep + cost.t_fetch) if pre else origin
    for qi, q in enumerate(queues):
        for ci, _ in enumerate(q.commands):
            host.append(Segment("control", t, t + cost.t_ctl, f"{q.engine}#{ci}"))
            t += cost.t_ctl
    doorbell_end = []
    for q in queues:
        t0 = t
        t += q.doorbell_count * cost.t_db
        host.append(Segment("schedule", t0, t, f"doorbell {q.engine}"))
        doorbell_end.append(t)

    records: list[CommandRecord] = []
    releases: list[float] = []
    trigger_end: list[Optional[float]] = [None] * nq
    if pre:
        t = origin
        for qi, q in enumerate(queues):
            polls = [c for c in q.commands if c.kind is CommandKind.POLL]
            if polls:
                t0 = t
                t += cost.t_trig * len(polls)
                host.append(Segment("trigger", t0, t, f"trigger {q.engine}"))
                trigger_end[qi] = t
        host_free = t
    else:
        host_free = t

    stuck = []
    for qi, q in enumerate(queues):
        polls = [(ci, c) for ci, c in enumerate(q.commands) if c.kind is CommandKind.POLL]
        if polls:
            missing = [c.slot for _, c in polls if c.slot not in triggered_slots]
            if missing or trigger_end[qi] is None:
                stuck.append(f"queue {q.engine} polls slot(s) {missing or [c.slot for _, c in polls]} never written")
                continue
            # polls are fetched right after the doorbell; they retire once the trigger is seen
            release = trigger_end[qi] + cost.t_poll_lat
            fstart = doorbell_end[qi]
            for ci, c in polls:
                records.append(CommandRecord(qi, ci, c.kind, (fstart, fstart + cost.t_fetch), (fstart + cost.t_fetch, release)))
                fstart += cost.t_fetch
        else:
            release = doorbell_end[qi]
        releases.append(release)
    if stuck:
        raise SimulationDeadlock("; ".join(stuck))

    # engine fetch sequence and flow admissions
    admissions: list[tuple[float, int, int]] = []  # (time, seq, record index)
    flow_specs: dict[int, list[tuple[Optional[LinkId], int]]] = {}
    queue_recs: list[list[int]] = [[] for _ in range(nq)]
    for qi, q in enumerate(queues):
        t = releases[qi]
        for ci, cmd in enumerate(q.commands):
            if cmd.kind is CommandKind.POLL:
                continue
            if cmd.kind is CommandKind.TIMESTAMP:
                rec = CommandRecord(qi, ci, cmd.kind, None, (t, t))
            else:
                rec = CommandRecord(qi, ci, cmd.kind, (t, t + cost.t_fetch), (t + cost.t_fetch, math.nan))
                t += cost.t_fetch
            ri = len(records)
            records.append(rec)
            queue_recs[qi].append(ri)
            if cmd.kind.moves_data:
                flow_specs[ri] = [(LinkId(s, d) if s != d else None, cmd.size) for s, d in cmd.transfers()]
                admissions.append((rec.fetch[1] + cost.t_copy_fixed, len(admissions), ri))

    _run_flows(records, admissions, flow_specs, engines, link_cap, engine_cap, observer)

    # signals wait for every earlier command in their queue
    last_sig = -math.inf
    sig_queue = None
    for qi in range(nq):
        done = releases[qi]
        for ri in queue_recs[qi]:
            rec = records[ri]
            if rec.kind.moves_data:
                done = max(done, rec.exec[1])
            elif rec.kind is CommandKind.ATOMIC_SIGNAL:
                start = max(rec.fetch[1], done)
                rec.exec = (start, start + cost.t_sig)
                done = rec.exec[1]
                if rec.exec[1] >= last_sig:
                    last_sig, sig_queue = rec.exec[1], qi

    n_sig = len(program.completion_signals)
    if n_sig and sig_queue is not None:
        obs_start = max(last_sig, host_free)
        end = obs_start + cost.observation_time(n_sig)
    else:
        data_done = max((r.exec[1] for r in records if r.kind.moves_data), default=host_free)
        obs_start = end = max(data_done, host_free)
    if end > obs_start:
        host.append(Segment("sync", obs_start, end, "observe signals"))

    tl = Timeline(
        program=program.name,
        gpu_count=topo.gpu_count,
        start=origin,
        end=end,
        engines=engines,
        releases=releases,
        host=host,
        records=records,
        critical_path=[],
        signal_count=n_sig,
        prelaunched=pre,
    )
    tl.critical_path = _critical_path(tl, queue_recs, trigger_end, host_free, obs_start, sig_queue, origin)
    return tl


def _run_flows(records, admissions, flow_specs, engines, link_cap, engine_cap, observer) -> None:
    admissions.sort()
    flows: list[_FlowState] = []
    active: set[int] = set()
    by_res: dict[Hashable, set[int]] = defaultdict(set)
    pending: dict[int, int] = {}
    heap: list[tuple[float, int, int]] = []
    caps: dict[Hashable, float] = {}

    def capacity(r):
        if r not in caps:
            caps[r] = link_cap if r[0] == "L" else engine_cap
        return caps[r]

    def recompute(now: float, seeds: set) -> None:
        comp_res, comp_flows = set(), set()
        stack = list(seeds)
        while stack:
            r = stack.pop()
            if r in comp_res:
                continue
            comp_res.add(r)
            for fi in by_res[r]:
                if fi not in comp_flows:
                    comp_flows.add(fi)
                    stack.extend(flows[fi].resources)
        if not comp_flows:
            return
        ids = sorted(comp_flows)
        res = [flows[fi].resources for fi in ids]
        rates = max_min_rates(res, {r: capacity(r) for r in comp_res})
        if observer is not None:
            observer(now, res, {r: capacity(r) for r in comp_res}, rates)
        for fi, rate in zip(ids, rates):
            f = flows[fi]
            f.remaining -= f.rate * (now - f.last)
            f.record.delivered += f.rate * (now - f.last)
            f.last = now
            f.rate = rate
            f.version += 1
            fin = now + (f.remaining / rate if rate > 0 else math.inf)
            heapq.heappush(heap, (fin, f.version, fi))

    ai = 0
    while ai < len(admissions) or heap:
        while heap and flows[heap[0][2]].version != heap[0][1]:
            heapq.heappop(heap)
        t_adm = admissions[ai][0] if ai < len(admissions) else math.inf
        t_fin = heap[0][0] if heap else math.inf
        if t_adm == math.inf and t_fin == math.inf:
            break
        if t_adm <= t_fin:
            now = t_adm
            seeds = set()
            while ai < len(admissions) and admissions[ai][0] <= now:
                _, _, ri = admissions[ai]
                ai += 1
                rec = records[ri]
                eng = ("E",) + tuple(engines[rec.queue])
                pending[ri] = len(flow_specs[ri])
                for link, nbytes in flow_specs[ri]:
                    resources = (eng,) if link is None else (("L",) + tuple(link), eng)
                    fr = FlowRecord(link, now, math.nan, nbytes)
                    rec.flows.append(fr)
                    f = _FlowState(ri, resources, nbytes, fr)
                    f.last = now
                    fi = len(flows)
                    flows.append(f)
                    active.add(fi)
                    for r in resources:
                        by_res[r].add(fi)
                        seeds.add(r)
            recompute(now, seeds)
        else:
            now = t_fin
            seeds = set()
            while heap and heap[0][0] <= now + _EPS:
                fin, ver, fi = heapq.heappop(heap)
                f = flows[fi]
                if f.version != ver or fi not in active:
                    continue
                f.record.delivered += f.rate * (fin - f.last)
                f.remaining = 0.0
                f.record.end = fin
                active.discard(fi)
                for r in f.resources:
                    by_res[r].discard(fi)
                    seeds.add(r)
                pending[f.cmd] -= 1
                if pending[f.cmd] == 0:
                    rec = records[f.cmd]
                    rec.exec = (rec.exec[0], max(fl.end for fl in rec.flows))
            recompute(now, seeds)


def _critical_path(tl, queue_recs, trigger_end, host_free, obs_start, sig_queue, origin):
    """Walk back from completion; the returned segments tile [origin, end]."""
    records = tl.records
    segs: list[Segment] = []
    if tl.end > obs_start:
        segs.append(Segment("sync", obs_start, tl.end, "observe"))
    ctl = [s for s in tl.host if s.phase == "control"]
    ctl_end = ctl[-1].end if ctl and not tl.prelaunched else origin

    def host_chain(upto: float, trig: float) -> None:
        if tl.prelaunched:
            if upto > trig:
                segs.append(Segment("poll", trig, upto, "poll"))
            segs.append(Segment("trigger", origin, trig, "trigger"))
        else:
            segs.append(Segment("schedule", ctl_end, upto, "doorbells"))
            segs.append(Segment("control", origin, ctl_end, "control"))

    if sig_queue is None or obs_start > _last_sig(tl):
        if obs_start > host_free:
            segs.append(Segment("copy", host_free, obs_start, "unsignaled data"))
        host_chain(host_free, host_free)
    else:
        qi = sig_queue
        rel = tl.releases[qi]
        sig = next(records[ri] for ri in reversed(queue_recs[qi]) if records[ri].kind is CommandKind.ATOMIC_SIGNAL)
        s0, s1 = sig.exec
        segs.append(Segment("sync", s0, s1, "signal"))
        data = [records[ri] for ri in queue_recs[qi] if records[ri].kind.moves_data and records[ri].exec[1] <= s0]
        crit = max(data, key=lambda r: (r.exec[1], r.ordinal)) if data else None
        if crit is not None and crit.exec[1] >= sig.fetch[1]:
            segs.append(Segment("copy", crit.fetch[1], s0, "copy"))
            sched_end = crit.fetch[1]
        else:
            sched_end = s0
        # behind a poll the ring was read during preparation; what remains is resuming past the poll
        segs.append(Segment("poll" if tl.prelaunched else "schedule", rel, sched_end, "fetch"))
        host_chain(rel, trigger_end[qi] if tl.prelaunched else rel)
    segs.reverse()
    return _tidy(segs)


def _last_sig(tl) -> float:
    return max((r.exec[1] for r in tl.records if r.kind is CommandKind.ATOMIC_SIGNAL), default=-math.inf)


def _tidy(segs: list[Segment]) -> list[Segment]:
    return [s for s in segs if s.end > s.start]


def simulate_sync_chain(
    gemm_duration: float, program: CommandProgram, topo: NodeTopology, cost: CostModel
) -> Timeline:
    """Producer kernel, stream signal, host forward, then the prelaunched collective."""
    if not program.prelaunched:
        raise SimulationError("the producer sync chain needs a prelaunched program")
    if gemm_duration < 0:
        raise SimulationError("gemm_duration must be >= 0")
    standalone = simulate(program, topo, cost)
    t_sig_end = gemm_duration + cost.t_stream_sig
    origin = t_sig_end + cost.t_host_fwd
    tl = simulate(program, topo, cost, origin=origin)
    chain = [
        Segment("kernel", 0.0, gemm_duration, "producer kernel"),
        Segment("sync", gemm_duration, t_sig_end, "stream signal"),
        Segment("sync", t_sig_end, origin, "host forward"),
    ]
    tl.host = chain[1:] + tl.host
    tl.critical_path = _tidy(chain) + tl.critical_path
    tl.start = 0.0
    e2e = tl.end
    tl.sync_chain = SyncChainInfo(
        gemm_ns=gemm_duration,
        standalone_ns=standalone.total,
        end_to_end_ns=e2e,
        overhead_ns=e2e - gemm_duration - standalone.total,
    )
    return tl


def phase_breakdown(timeline: Timeline) -> dict[str, float]:
    """Fraction of critical-path time per phase; sums to 1 for a nonzero timeline."""
    totals = timeline.phase_totals()
    total = timeline.total
    if total <= 0:
        return {p: 0.0 for p in PHASES}
    return {p: v / total for p, v in totals.items()}


@dataclass
class GpuActivity:
    busy_ns: float = 0.0
    commands: int = 0
    engines: int = 0


@dataclass
class ActivityReport:
    per_gpu: dict[int, GpuActivity]
    max_command_ns: float

    @property
    def engines_used(self) -> int:
        return sum(g.engines for g in self.per_gpu.values())

    @property
    def busy_ns(self) -> float:
        return sum(g.busy_ns for g in self.per_gpu.values())

    @property
    def busy_spread_ns(self) -> float:
        vals = [g.busy_ns for g in self.per_gpu.values()]
        return max(vals) - min(vals) if vals else 0.0


def engine_activity_report(timeline: Timeline) -> ActivityReport:
    """Per-GPU engine busy time (fetch + execution; poll waiting excluded)."""
    spans: dict[int, list[tuple[float, float]]] = defaultdict(list)
    per_cmd: dict[int, float] = defaultdict(float)
    per_gpu: dict[int, GpuActivity] = {}
    for rec in timeline.records:
        if rec.kind is CommandKind.POLL:
            continue
        iv = []
        if rec.fetch is not None:
            iv.append(rec.fetch)
        if rec.exec[1] > rec.exec[0]:
            iv.append(rec.exec)
        spans[rec.queue].extend(iv)
        if rec.kind.moves_data or rec.kind is CommandKind.ATOMIC_SIGNAL:
            per_cmd[rec.queue] += sum(b - a for a, b in iv)
    for qi, eng in enumerate(timeline.engines):
        g = per_gpu.setdefault(eng.gpu, GpuActivity())
        g.engines += 1
        g.commands += sum(1 for r in timeline.records if r.queue == qi and r.kind is not CommandKind.POLL)
        g.busy_ns += _union_length(spans[qi])
    return ActivityReport(dict(sorted(per_gpu.items())), max(per_cmd.values(), default=0.0))


def _union_length(iv: list[tuple[float, float]]) -> float:
    total, cur_a, cur_b = 0.0, None, None
    for a, b in sorted(iv):
        if cur_b is None or a > cur_b:
            if cur_b is not None:
                total += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    if cur_b is not None:
        total += cur_b - cur_a
    return total
