"""Compile all-gather / all-to-all collectives into DMA command programs.

Every compiler emits commands GPU by GPU; each GPU's commands take its
lowest-indexed free engines in emission order. Completion-signal slots are
numbered in emission order across the whole program.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Optional

from . import program as P
from .program import BufferRef, CommandProgram, CommandQueue, DmaCommand
from .topology import EngineId, NodeTopology

KB = 1024
MB = 1024 * KB
GB = 1024 * MB


class CollectiveKind(str, enum.Enum):
    ALL_GATHER = "allgather"
    ALL_TO_ALL = "alltoall"


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class CollectiveSpec:
    """``chunk_size`` is the per-peer transfer size in bytes."""

    kind: CollectiveKind
    chunk_size: int
    gpu_count: int
    in_place: bool = False

    def __post_init__(self) -> None:
        if self.chunk_size <= 0:
            raise CompileError(f"chunk size must be positive, got {self.chunk_size}")
        if self.gpu_count < 2:
            raise CompileError(f"need at least 2 GPUs, got {self.gpu_count}")
        if self.kind is CollectiveKind.ALL_GATHER and self.in_place:
            raise CompileError("all-gather cannot be in-place")


# -- buffer layout -----------------------------------------------------------

IN = "in"
OUT = "out"


def _layout(spec: CollectiveSpec) -> tuple[tuple[int, str, int], ...]:
    n, s = spec.gpu_count, spec.chunk_size
    bufs = []
    for g in range(n):
        if spec.kind is CollectiveKind.ALL_GATHER:
            bufs += [(g, IN, s), (g, OUT, n * s)]
        elif spec.in_place:
            bufs.append((g, IN, n * s))
        else:
            bufs += [(g, IN, n * s), (g, OUT, n * s)]
    return tuple(bufs)


def _chunk(spec: CollectiveSpec, gpu: int, buf: str, index: int) -> BufferRef:
    s = spec.chunk_size
    return BufferRef(gpu, buf, index * s, s)


def _transfer_refs(spec: CollectiveSpec, i: int, j: int) -> tuple[BufferRef, BufferRef]:
    """Source and destination of GPU i's contribution to GPU j."""
    if spec.kind is CollectiveKind.ALL_GATHER:
        return _chunk(spec, i, IN, 0), _chunk(spec, j, OUT, i)
    out = IN if spec.in_place else OUT
    return _chunk(spec, i, IN, j), _chunk(spec, j, out, i)


class _Builder:
    def __init__(self, spec: CollectiveSpec, topo: NodeTopology, name: str):
        if topo.gpu_count != spec.gpu_count:
            raise CompileError(f"spec has {spec.gpu_count} GPUs but topology has {topo.gpu_count}")
        self.spec, self.topo, self.name = spec, topo, name
        self.queues: list[CommandQueue] = []
        self.next_engine = [0] * spec.gpu_count
        self.next_slot = 0

    def queue(self, gpu: int, data: list[DmaCommand]) -> None:
        idx = self.next_engine[gpu]
        if idx >= self.topo.engines_per_gpu:
            raise CompileError(
                f"engine overflow: {self.name} needs more than {self.topo.engines_per_gpu} engines on GPU {gpu}"
            )
        self.next_engine[gpu] += 1
        cmds = tuple(data) + (P.signal(self.next_slot),)
        self.next_slot += 1
        self.queues.append(CommandQueue(EngineId(gpu, idx), cmds, doorbell_count=1))

    def build(self) -> CommandProgram:
        slots = frozenset(q.commands[-1].slot for q in self.queues)
        return CommandProgram(
            queues=tuple(self.queues),
            completion_signals=slots,
            buffers=_layout(self.spec),
            name=self.name,
            spec=self.spec,
        )


def compile_pcpy(spec: CollectiveSpec, topo: NodeTopology) -> CommandProgram:
    """One copy plus one signal per engine, n(n-1) engines in total."""
    if spec.in_place:
        raise CompileError("pcpy is compiled out-of-place; in-place copy exchange has WAR hazards")
    n = spec.gpu_count
    if topo.engines_per_gpu < n - 1:
        raise CompileError(f"engine overflow: pcpy needs {n - 1} engines per GPU, topology has {topo.engines_per_gpu}")
    b = _Builder(spec, topo, "pcpy")
    for i in range(n):
        for k in range(1, n):
            src, dst = _transfer_refs(spec, i, (i + k) % n)
            b.queue(i, [P.copy(src, dst)])
    return b.build()


def compile_bcst(spec: CollectiveSpec, topo: NodeTopology) -> CommandProgram:
    """All-gather with two-destination broadcasts.

    GPU i's k-th broadcast targets peers (i+2k+1) and (i+2k+2) mod n. For even
    n a trailing copy serves peer (i+n-1) mod n.
    """
    if spec.kind is not CollectiveKind.ALL_GATHER:
        raise CompileError("bcst only implements all-gather")
    n = spec.gpu_count
    b = _Builder(spec, topo, "bcst")
    for i in range(n):
        src = _chunk(spec, i, IN, 0)
        for k in range((n - 1) // 2):
            d1, d2 = (i + 2 * k + 1) % n, (i + 2 * k + 2) % n
            b.queue(i, [P.broadcast(src, _chunk(spec, d1, OUT, i), _chunk(spec, d2, OUT, i))])
        if n % 2 == 0:
            b.queue(i, [P.copy(src, _chunk(spec, (i + n - 1) % n, OUT, i))])
    return b.build()


def swap_owner(i: int, j: int, n: int) -> int:
    """GPU that issues the swap for unordered pair (i, j)."""
    i, j = min(i, j), max(i, j)
    return i if j - i <= n // 2 else j


def compile_swap(spec: CollectiveSpec, topo: NodeTopology) -> CommandProgram:
    """In-place all-to-all with one swap per unordered GPU pair."""
    if spec.kind is not CollectiveKind.ALL_TO_ALL:
        raise CompileError("swap only implements all-to-all")
    spec = replace(spec, in_place=True)
    n = spec.gpu_count
    b = _Builder(spec, topo, "swap")
    for g in range(n):
        for peer in sorted(p for p in range(n) if p != g and swap_owner(g, p, n) == g):
            b.queue(g, [P.swap(_chunk(spec, g, IN, peer), _chunk(spec, peer, IN, g))])
    return b.build()


def compile_b2b(spec: CollectiveSpec, topo: NodeTopology) -> CommandProgram:
    """One engine per GPU holding all n-1 copies back to back."""
    if spec.in_place:
        raise CompileError("b2b is compiled out-of-place")
    n = spec.gpu_count
    b = _Builder(spec, topo, "b2b")
    for i in range(n):
        copies = []
        for k in range(1, n):
            src, dst = _transfer_refs(spec, i, (i + k) % n)
            copies.append(P.copy(src, dst))
        b.queue(i, copies)
    return b.build()


class PrelaunchError(ValueError):
    pass


def apply_prelaunch(program: CommandProgram, slot_policy: str = "per_engine") -> CommandProgram:
    """Gate every nonempty queue behind a poll on its own trigger slot."""
    if slot_policy != "per_engine":
        raise PrelaunchError(f"unsupported slot policy {slot_policy!r}")
    if program.prelaunched:
        raise PrelaunchError(f"{program.name} is already prelaunched")
    used = set(program.completion_signals)
    nxt = max(used, default=-1) + 1
    queues, triggers = [], []
    for q in program.queues:
        if not q.commands:
            queues.append(q)
            continue
        queues.append(replace(q, commands=(P.poll(nxt),) + q.commands))
        triggers.append(nxt)
        nxt += 1
    return replace(
        program,
        queues=tuple(queues),
        trigger_slots=frozenset(triggers),
        prelaunched=True,
        name="prelaunch_" + program.name,
    )


def compile_single_copy(size: int, topo: NodeTopology, src_gpu: int = 0, dst_gpu: int = 1) -> CommandProgram:
    """One peer-to-peer copy followed by its signal, as used for phase breakdowns."""
    src = BufferRef(src_gpu, IN, 0, size)
    dst = BufferRef(dst_gpu, OUT, 0, size)
    q = CommandQueue(EngineId(src_gpu, 0), (P.copy(src, dst), P.signal(0)))
    return CommandProgram(
        queues=(q,),
        completion_signals=frozenset({0}),
        buffers=((src_gpu, IN, size), (dst_gpu, OUT, size)),
        name="single_copy",
    )


# -- registry ------------------------------------------------------------------

BASE_IMPLS: dict[str, Callable[[CollectiveSpec, NodeTopology], CommandProgram]] = {
    "pcpy": compile_pcpy,
    "bcst": compile_bcst,
    "swap": compile_swap,
    "b2b": compile_b2b,
}

_KIND_IMPLS = {
    CollectiveKind.ALL_GATHER: ("pcpy", "bcst", "b2b"),
    CollectiveKind.ALL_TO_ALL: ("pcpy", "swap", "b2b"),
}


def implementations(kind: CollectiveKind) -> list[str]:
    base = _KIND_IMPLS[CollectiveKind(kind)]
    return list(base) + ["prelaunch_" + b for b in base]


def compile_collective(spec: CollectiveSpec, impl: str, topo: NodeTopology) -> CommandProgram:
    base = impl[len("prelaunch_"):] if impl.startswith("prelaunch_") else impl
    if base not in BASE_IMPLS:
        raise CompileError(f"unknown implementation {impl!r}")
    if base not in _KIND_IMPLS[spec.kind]:
        raise CompileError(f"{base} does not implement {spec.kind.value}")
    if base == "swap" and not spec.in_place:
        spec = replace(spec, in_place=True)
    prog = BASE_IMPLS[base](spec, topo)
    return apply_prelaunch(prog) if base != impl else prog


# -- best implementation per size range ---------------------------------------

# (lower bound inclusive, implementation); ranges run to the next bound.
SELECTION_TABLE: dict[CollectiveKind, list[tuple[int, str]]] = {
    CollectiveKind.ALL_GATHER: [
        (1 * KB, "prelaunch_b2b"),
        (256 * KB, "prelaunch_bcst"),
        (1 * MB, "prelaunch_pcpy"),
        (512 * MB, "pcpy"),
    ],
    CollectiveKind.ALL_TO_ALL: [
        (1 * KB, "prelaunch_b2b"),
        (64 * KB, "prelaunch_swap"),
        (4 * MB, "prelaunch_pcpy"),
        (1 * GB, "pcpy"),
    ],
}


def select_implementation(kind: CollectiveKind, size: int) -> str:
    """Best-known implementation for a per-peer chunk size (bytes)."""
    if size < 1 * KB:
        raise CompileError(f"size {size} below the 1KB minimum")
    choice = None
    for lower, impl in SELECTION_TABLE[CollectiveKind(kind)]:
        if size >= lower:
            choice = impl
    return choice
