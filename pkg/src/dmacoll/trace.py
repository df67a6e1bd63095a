"""Trace-event JSON export for simulated timelines."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

from .sim import Timeline, _exec_phase


def trace_events(tl: Timeline) -> list[dict]:
    """B/E event pairs; pid is the GPU (the host gets pid ``gpu_count``), tid the engine index.

    Timestamps are microseconds. Prelaunch preparation shows up at negative times.
    """
    host_pid = tl.gpu_count
    raw: list[tuple[float, int, int, dict]] = []

    def pair(name, t0, t1, pid, tid, phase):
        seq = len(raw)
        raw.append((t0, 1, seq, {"name": name, "ph": "B", "ts": t0 / 1000, "pid": pid, "tid": tid, "cat": phase}))
        raw.append((t1, 0, seq, {"name": name, "ph": "E", "ts": t1 / 1000, "pid": pid, "tid": tid, "cat": phase}))

    for seg in tl.host:
        if seg.end > seg.start:
            pair(f"{seg.phase} {seg.label}".strip(), seg.start, seg.end, host_pid, 0, seg.phase)
    for rec in tl.records:
        eng = tl.engines[rec.queue]
        ref = f"{eng}#{rec.ordinal}"
        if rec.fetch is not None and rec.fetch[1] > rec.fetch[0]:
            pair(f"fetch {ref}", rec.fetch[0], rec.fetch[1], eng.gpu, eng.index, "schedule")
        phase = _exec_phase(rec.kind)
        if phase and rec.exec[1] > rec.exec[0]:
            pair(f"{rec.kind.value} {ref}", rec.exec[0], rec.exec[1], eng.gpu, eng.index, phase)
    # ends sort before starts at equal times so intervals never appear to overlap
    raw.sort(key=lambda r: (r[0], r[1], r[2]))
    return [ev for *_, ev in raw]


def write_trace(tl: Timeline, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(trace_events(tl), indent=1) + "\n")
