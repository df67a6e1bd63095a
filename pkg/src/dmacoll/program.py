"""DMA command vocabulary, per-engine queues and whole command programs."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

from .topology import EngineId, GpuId, NodeTopology


class CommandKind(str, enum.Enum):
    COPY = "Copy"
    BROADCAST = "Broadcast"
    SWAP = "Swap"
    ATOMIC_SIGNAL = "AtomicSignal"
    POLL = "Poll"
    TIMESTAMP = "Timestamp"

    @property
    def moves_data(self) -> bool:
        return self in (CommandKind.COPY, CommandKind.BROADCAST, CommandKind.SWAP)


@dataclass(frozen=True)
class BufferRef:
    gpu: GpuId
    buffer: str
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length

    def overlaps(self, other: "BufferRef") -> bool:
        return (
            self.gpu == other.gpu
            and self.buffer == other.buffer
            and self.offset < other.end
            and other.offset < self.end
        )

    def __str__(self) -> str:
        return f"g{self.gpu}:{self.buffer}[{self.offset}+{self.length}]"


@dataclass(frozen=True)
class DmaCommand:
    """One queue entry.

    Field use by kind: Copy ``src``/``dst``; Broadcast ``src``/``dst``/``dst2``;
    Swap ``src``/``peer``; AtomicSignal ``slot``; Poll ``slot`` and ``expected``.
    """

    kind: CommandKind
    src: Optional[BufferRef] = None
    dst: Optional[BufferRef] = None
    dst2: Optional[BufferRef] = None
    peer: Optional[BufferRef] = None
    slot: Optional[int] = None
    expected: int = 1

    @property
    def size(self) -> int:
        return self.src.length if self.src is not None else 0

    def regions(self) -> list[BufferRef]:
        return [r for r in (self.src, self.dst, self.dst2, self.peer) if r is not None]

    def reads(self) -> list[BufferRef]:
        if self.kind is CommandKind.SWAP:
            return [self.src, self.peer]
        return [self.src] if self.kind.moves_data else []

    def writes(self) -> list[BufferRef]:
        k = self.kind
        if k is CommandKind.COPY:
            return [self.dst]
        if k is CommandKind.BROADCAST:
            return [self.dst, self.dst2]
        if k is CommandKind.SWAP:
            return [self.src, self.peer]
        return []

    def transfers(self) -> list[tuple[GpuId, GpuId]]:
        """Directed (src gpu, dst gpu) data flows this command produces."""
        k = self.kind
        if k is CommandKind.COPY:
            return [(self.src.gpu, self.dst.gpu)]
        if k is CommandKind.BROADCAST:
            return [(self.src.gpu, self.dst.gpu), (self.src.gpu, self.dst2.gpu)]
        if k is CommandKind.SWAP:
            return [(self.src.gpu, self.peer.gpu), (self.peer.gpu, self.src.gpu)]
        return []


def copy(src: BufferRef, dst: BufferRef) -> DmaCommand:
    return DmaCommand(CommandKind.COPY, src=src, dst=dst)


def broadcast(src: BufferRef, dst1: BufferRef, dst2: BufferRef) -> DmaCommand:
    return DmaCommand(CommandKind.BROADCAST, src=src, dst=dst1, dst2=dst2)


def swap(a: BufferRef, b: BufferRef) -> DmaCommand:
    return DmaCommand(CommandKind.SWAP, src=a, peer=b)


def signal(slot: int) -> DmaCommand:
    return DmaCommand(CommandKind.ATOMIC_SIGNAL, slot=slot)


def poll(slot: int, expected: int = 1) -> DmaCommand:
    return DmaCommand(CommandKind.POLL, slot=slot, expected=expected)


@dataclass(frozen=True)
class CommandQueue:
    engine: EngineId
    commands: tuple[DmaCommand, ...]
    doorbell_count: int = 1

    @property
    def data_commands(self) -> list[DmaCommand]:
        return [c for c in self.commands if c.kind.moves_data]

    @property
    def qid(self) -> str:
        return str(self.engine)


@dataclass(frozen=True)
class CommandProgram:
    queues: tuple[CommandQueue, ...]
    completion_signals: frozenset[int]
    buffers: tuple[tuple[GpuId, str, int], ...]
    name: str = ""
    spec: object = None  # CollectiveSpec; typed loosely to avoid an import cycle
    trigger_slots: frozenset[int] = frozenset()
    prelaunched: bool = False

    def buffer_length(self, gpu: GpuId, name: str) -> Optional[int]:
        for g, b, length in self.buffers:
            if g == gpu and b == name:
                return length
        return None

    def iter_commands(self) -> Iterator[tuple[int, int, DmaCommand]]:
        """(queue index, ordinal, command) in emission order."""
        for qi, q in enumerate(self.queues):
            for ci, cmd in enumerate(q.commands):
                yield qi, ci, cmd

    @property
    def command_count(self) -> int:
        return sum(len(q.commands) for q in self.queues)

    def sorted(self) -> "CommandProgram":
        """Same program with queues in (gpu, engine index) order."""
        from dataclasses import replace

        return replace(self, queues=tuple(sorted(self.queues, key=lambda q: q.engine)))


# -- metrics -----------------------------------------------------------------


@dataclass
class GpuMetrics:
    data_commands: int = 0
    sync_commands: int = 0
    poll_commands: int = 0
    engines_used: int = 0
    doorbells: int = 0


@dataclass
class MetricsReport:
    data_commands: int = 0
    sync_commands: int = 0
    poll_commands: int = 0
    engines_used: int = 0
    doorbells: int = 0
    per_gpu: dict[GpuId, GpuMetrics] = field(default_factory=dict)
    by_kind: dict[str, int] = field(default_factory=dict)

    @property
    def non_copy_events(self) -> int:
        """Sync commands plus doorbells, the per-engine overheads b2b cuts."""
        return self.sync_commands + self.doorbells


def static_metrics(program: CommandProgram) -> MetricsReport:
    rep = MetricsReport()
    kinds: Counter = Counter()
    for q in program.queues:
        if not q.commands:
            continue
        g = rep.per_gpu.setdefault(q.engine.gpu, GpuMetrics())
        g.engines_used += 1
        g.doorbells += q.doorbell_count
        for cmd in q.commands:
            kinds[cmd.kind.value] += 1
            if cmd.kind.moves_data:
                g.data_commands += 1
            elif cmd.kind is CommandKind.ATOMIC_SIGNAL:
                g.sync_commands += 1
            elif cmd.kind is CommandKind.POLL:
                g.poll_commands += 1
    for g in rep.per_gpu.values():
        rep.data_commands += g.data_commands
        rep.sync_commands += g.sync_commands
        rep.poll_commands += g.poll_commands
        rep.engines_used += g.engines_used
        rep.doorbells += g.doorbells
    rep.per_gpu = dict(sorted(rep.per_gpu.items()))
    rep.by_kind = dict(sorted(kinds.items()))
    return rep


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    queue: Optional[int] = None
    command: Optional[int] = None

    def __str__(self) -> str:
        where = ""
        if self.queue is not None:
            where = f" (queue {self.queue}" + (f", command {self.command})" if self.command is not None else ")")
        return f"{self.code}{where}: {self.message}"


def validate_program(program: CommandProgram, topo: NodeTopology) -> Optional[Violation]:
    """First invariant violation found, or ``None`` for a valid program."""
    for v in _violations(program, topo):
        return v
    return None


def _violations(program: CommandProgram, topo: NodeTopology) -> Iterator[Violation]:
    declared = {}
    for gpu, name, length in program.buffers:
        if not 0 <= gpu < topo.gpu_count:
            yield Violation("bad buffer", f"buffer {name!r} declared on unknown GPU {gpu}")
            return
        if length <= 0:
            yield Violation("bad buffer", f"buffer {name!r} on GPU {gpu} has length {length}")
            return
        declared[(gpu, name)] = length

    seen_engines: set[EngineId] = set()
    per_gpu_engines: Counter = Counter()
    signal_targets: list[int] = []
    poll_slots: list[int] = []

    for qi, q in enumerate(program.queues):
        eng = q.engine
        if not 0 <= eng.gpu < topo.gpu_count:
            yield Violation("bad engine", f"engine {eng} on unknown GPU", qi)
            return
        if eng.index < 0 or eng.index >= topo.engines_per_gpu:
            yield Violation(
                "engine overflow",
                f"engine index {eng.index} >= engines_per_gpu {topo.engines_per_gpu}",
                qi,
            )
            return
        if eng in seen_engines:
            yield Violation("duplicate queue", f"engine {eng} has more than one queue", qi)
            return
        seen_engines.add(eng)
        if not q.commands:
            continue
        per_gpu_engines[eng.gpu] += 1
        if q.doorbell_count < 1:
            yield Violation("no doorbell", "nonempty queue has no doorbell event", qi)
            return

        seen_non_poll = False
        for ci, cmd in enumerate(q.commands):
            if cmd.kind is CommandKind.POLL:
                if seen_non_poll:
                    yield Violation("late poll", "poll must precede the commands it gates", qi, ci)
                    return
                if cmd.slot is None:
                    yield Violation("bad poll", "poll without a slot", qi, ci)
                    return
                poll_slots.append(cmd.slot)
                continue
            seen_non_poll = True
            if cmd.kind is CommandKind.ATOMIC_SIGNAL:
                if cmd.slot is None:
                    yield Violation("bad signal", "signal without a target slot", qi, ci)
                    return
                signal_targets.append(cmd.slot)
                continue
            if cmd.kind is CommandKind.TIMESTAMP:
                continue
            err = _check_data_command(cmd, declared)
            if err:
                yield Violation(err[0], err[1], qi, ci)
                return

        data_idx = [ci for ci, c in enumerate(q.commands) if c.kind.moves_data]
        sig_idx = [ci for ci, c in enumerate(q.commands) if c.kind is CommandKind.ATOMIC_SIGNAL]
        if data_idx:
            if not sig_idx or q.commands[-1].kind is not CommandKind.ATOMIC_SIGNAL:
                yield Violation("unsignaled queue", "queue with data movement must end with an AtomicSignal", qi)
                return
            if len(sig_idx) > 1:
                yield Violation("extra signal", f"queue has {len(sig_idx)} AtomicSignals, expected 1", qi, sig_idx[1])
                return

    for gpu, used in per_gpu_engines.items():
        if used > topo.engines_per_gpu:
            yield Violation("engine overflow", f"GPU {gpu} uses {used} engines > {topo.engines_per_gpu}")
            return

    if len(set(signal_targets)) != len(signal_targets):
        yield Violation("shared signal", "two signals target the same host slot")
        return
    if set(signal_targets) != set(program.completion_signals):
        yield Violation("signal mismatch", "completion_signals differ from the queues' signal targets")
        return
    if len(set(poll_slots)) != len(poll_slots):
        yield Violation("shared trigger", "two polls share a trigger slot")
        return
    if set(poll_slots) != set(program.trigger_slots):
        yield Violation("trigger mismatch", "trigger_slots differ from the queues' poll slots")
        return
    if bool(program.trigger_slots) != program.prelaunched:
        yield Violation("prelaunch flag", "trigger_slots must be nonempty iff the program is prelaunched")
        return
    if set(signal_targets) & set(poll_slots):
        yield Violation("slot clash", "a host slot is used both as trigger and completion signal")


def _check_data_command(cmd: DmaCommand, declared: dict) -> Optional[tuple[str, str]]:
    k = cmd.kind
    if k is CommandKind.COPY:
        needed = (cmd.src, cmd.dst)
    elif k is CommandKind.BROADCAST:
        needed = (cmd.src, cmd.dst, cmd.dst2)
    else:
        needed = (cmd.src, cmd.peer)
    if any(r is None for r in needed):
        return "missing operand", f"{k.value} is missing a buffer operand"
    for r in needed:
        length = declared.get((r.gpu, r.buffer))
        if length is None:
            return "undeclared buffer", f"{r} refers to an undeclared buffer"
        if r.offset < 0 or r.end > length:
            return "out of bounds", f"{r} exceeds declared length {length}"
    sizes = {r.length for r in needed}
    if len(sizes) != 1:
        return "size mismatch", f"{k.value} regions differ in size"
    if cmd.size <= 0:
        return "empty transfer", f"{k.value} has size {cmd.size}"
    for i, a in enumerate(needed):
        for b in needed[i + 1:]:
            if a.overlaps(b):
                return "self overlap", f"{a} overlaps {b}"
    if k is CommandKind.BROADCAST and cmd.dst.gpu == cmd.dst2.gpu:
        return "bad broadcast", "broadcast destinations must be on distinct GPUs"
    if k is CommandKind.SWAP and cmd.src.gpu == cmd.peer.gpu:
        return "bad swap", "swap regions must be on distinct GPUs"
    return None


# -- listing export ----------------------------------------------------------


def listing(program: CommandProgram) -> str:
    """Tab-separated program listing, ordered by GPU, engine index, ordinal."""
    rows = ["queue\tordinal\tkind\tsrc\tdst\tsize\tslot"]
    for q in sorted(program.queues, key=lambda q: q.engine):
        for ci, cmd in enumerate(q.commands):
            k = cmd.kind
            if k is CommandKind.COPY:
                dsts = str(cmd.dst)
            elif k is CommandKind.BROADCAST:
                dsts = f"{cmd.dst},{cmd.dst2}"
            elif k is CommandKind.SWAP:
                dsts = str(cmd.peer)
            else:
                dsts = "-"
            src = str(cmd.src) if cmd.src is not None else "-"
            slot = "-" if cmd.slot is None else (f"{cmd.slot}=={cmd.expected}" if k is CommandKind.POLL else str(cmd.slot))
            rows.append(f"{q.qid}\t{ci}\t{k.value}\t{src}\t{dsts}\t{cmd.size}\t{slot}")
    return "\n".join(rows) + "\n"


def dump_program(program: CommandProgram, path: Union[str, Path]) -> None:
    Path(path).write_text(listing(program))
