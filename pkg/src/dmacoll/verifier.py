"""Symbolic execution of command programs over chunk-labeled buffers.

Each chunk carries a label ``(origin gpu, chunk index)``; ``None`` marks an
unwritten output slot. The executor checks the collective postcondition and
flags WAR/WAW hazards.

Interleavings are explored modulo commutation of independent commands: two
data commands conflict when one writes a region the other reads or writes.
The outcome of an ordering depends only on the relative order it gives each
conflicting pair, so one representative is executed per distinct
orientation. ``brute_force=True`` executes every ordering instead.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .compiler import IN, OUT, CollectiveKind, CollectiveSpec
from .program import BufferRef, CommandKind, CommandProgram, DmaCommand
from .topology import GpuId, LinkId

Label = Optional[tuple[int, int]]
Region = tuple[int, str, int]

EXHAUSTIVE_MAX_GPUS = 4
DEFAULT_SAMPLES = 1000
MAX_ORIENTATION_BITS = 16


def _key(ref: BufferRef) -> Region:
    return (ref.gpu, ref.buffer, ref.offset)


@dataclass
class Verdict:
    status: str  # "ok" | "mismatch" | "hazard"
    detail: str = ""
    mode: str = ""
    orderings: int = 0
    classes: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def __str__(self) -> str:
        s = f"{self.status.upper()}"
        if self.detail:
            s += f": {self.detail}"
        return s + f" [{self.mode}: {self.orderings} orderings, {self.classes} trace classes]"


class Hazard(Exception):
    pass


def initial_state(spec: CollectiveSpec) -> dict[Region, Label]:
    n, s = spec.gpu_count, spec.chunk_size
    st: dict[Region, Label] = {}
    for g in range(n):
        if spec.kind is CollectiveKind.ALL_GATHER:
            st[(g, IN, 0)] = (g, 0)
            for k in range(n):
                # local chunk placed by a zero-cost local copy
                st[(g, OUT, k * s)] = (g, 0) if k == g else None
        else:
            for j in range(n):
                st[(g, IN, j * s)] = (g, j)
            if not spec.in_place:
                for i in range(n):
                    st[(g, OUT, i * s)] = (g, g) if i == g else None
    return st


def expected_state(spec: CollectiveSpec) -> dict[Region, Label]:
    n, s = spec.gpu_count, spec.chunk_size
    out = {}
    for g in range(n):
        for k in range(n):
            if spec.kind is CollectiveKind.ALL_GATHER:
                out[(g, OUT, k * s)] = (k, 0)
            else:
                buf = IN if spec.in_place else OUT
                out[(g, buf, k * s)] = (k, g)
    return out


def execute(commands: Sequence[DmaCommand], state: dict[Region, Label]) -> dict[Region, Label]:
    """Run data commands in the given order; raises Hazard on WAR/WAW."""
    st = dict(state)
    init = state
    written: set[Region] = set()

    def read(ref: BufferRef, idx: int) -> Label:
        k = _key(ref)
        if k not in st:
            raise Hazard(f"command {idx} reads unknown region {ref}")
        lab = st[k]
        if lab is None:
            raise Hazard(f"command {idx} reads uninitialized region {ref}")
        if init.get(k) is not None and lab != init[k]:
            raise Hazard(f"WAR: command {idx} reads {ref} after it was overwritten with {lab}")
        return lab

    def write(ref: BufferRef, lab: Label, idx: int) -> None:
        k = _key(ref)
        if k not in st:
            raise Hazard(f"command {idx} writes unknown region {ref}")
        if k in written and st[k] != lab:
            raise Hazard(f"WAW: command {idx} overwrites {ref} ({st[k]} -> {lab})")
        st[k] = lab
        written.add(k)

    for idx, cmd in enumerate(commands):
        kind = cmd.kind
        if kind is CommandKind.COPY:
            write(cmd.dst, read(cmd.src, idx), idx)
        elif kind is CommandKind.BROADCAST:
            lab = read(cmd.src, idx)
            write(cmd.dst, lab, idx)
            write(cmd.dst2, lab, idx)
        elif kind is CommandKind.SWAP:
            # atomic two-sided exchange: both reads happen before either write
            a, b = read(cmd.src, idx), read(cmd.peer, idx)
            write(cmd.src, b, idx)
            write(cmd.peer, a, idx)
    return st


# -- interleaving structure --------------------------------------------------


@dataclass
class _Structure:
    commands: list[DmaCommand]
    chains: list[list[int]]  # per queue, data-command ids in queue order
    pairs: list[tuple[int, int]]  # cross-queue conflicting pairs (a < b)


def _structure(program: CommandProgram) -> _Structure:
    commands: list[DmaCommand] = []
    chains = []
    qid_of = []
    for qi, q in enumerate(program.queues):
        chain = []
        for cmd in q.commands:
            if cmd.kind.moves_data:
                chain.append(len(commands))
                commands.append(cmd)
                qid_of.append(qi)
        if chain:
            chains.append(chain)
    reads = [{_key(r) for r in c.reads()} for c in commands]
    writes = [{_key(r) for r in c.writes()} for c in commands]
    touching: dict[Region, list[int]] = defaultdict(list)
    for i in range(len(commands)):
        for k in reads[i] | writes[i]:
            touching[k].append(i)
    pairs = set()
    for k, ids in touching.items():
        for a, b in itertools.combinations(sorted(set(ids)), 2):
            if qid_of[a] == qid_of[b]:
                continue
            if k in writes[a] or k in writes[b]:
                pairs.add((a, b))
    return _Structure(commands, chains, sorted(pairs))


def _linearize(struct: _Structure, before: dict[tuple[int, int], bool]) -> Optional[list[int]]:
    """Topological order honoring queue order and chosen pair orientations."""
    m = len(struct.commands)
    succ: list[list[int]] = [[] for _ in range(m)]
    indeg = [0] * m
    for chain in struct.chains:
        for a, b in zip(chain, chain[1:]):
            succ[a].append(b)
            indeg[b] += 1
    for (a, b), a_first in before.items():
        u, v = (a, b) if a_first else (b, a)
        succ[u].append(v)
        indeg[v] += 1
    ready = sorted(i for i in range(m) if indeg[i] == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
        ready.sort()
    return order if len(order) == m else None


def _run(struct: _Structure, order: Iterable[int], spec: CollectiveSpec) -> tuple[str, str]:
    try:
        final = execute([struct.commands[i] for i in order], initial_state(spec))
    except Hazard as exc:
        return "hazard", str(exc)
    for region, want in expected_state(spec).items():
        got = final.get(region)
        if got != want:
            g, buf, off = region
            return "mismatch", f"GPU {g} {buf} slot {off // spec.chunk_size}: expected {want}, got {got}"
    return "ok", ""


def random_interleavings(struct: _Structure, count: int, seed: int) -> np.ndarray:
    """``count`` uniformly shuffled merges of the queue chains (rows of command ids)."""
    lengths = [len(c) for c in struct.chains]
    base = np.repeat(np.arange(len(lengths)), lengths)
    rng = np.random.default_rng(seed)
    mat = rng.permuted(np.tile(base, (count, 1)), axis=1)
    # k-th occurrence of queue q in a row is q's k-th command
    flat_ids = np.concatenate(struct.chains) if struct.chains else np.zeros(0, dtype=int)
    pos = np.argsort(mat, axis=1, kind="stable")  # positions grouped per queue, in order
    order = np.empty_like(pos)
    rows = np.arange(count)[:, None]
    order[rows, pos] = flat_ids[None, :]
    return order


def verify_collective(
    program: CommandProgram,
    spec: Optional[CollectiveSpec] = None,
    *,
    seed: int = 0,
    samples: int = DEFAULT_SAMPLES,
    exhaustive: Optional[bool] = None,
    brute_force: bool = False,
) -> Verdict:
    """Check the collective postcondition under many legal orderings.

    Up to ``EXHAUSTIVE_MAX_GPUS`` GPUs every trace class is enumerated;
    beyond that ``samples`` seeded random interleavings are drawn.
    """
    spec = spec or program.spec
    if spec is None:
        raise ValueError("program carries no CollectiveSpec")
    struct = _structure(program)
    if exhaustive is None:
        exhaustive = spec.gpu_count <= EXHAUSTIVE_MAX_GPUS
    notes = []
    if spec.kind is CollectiveKind.ALL_GATHER or not spec.in_place:
        notes.append("local chunk placed by zero-cost local copy")

    if brute_force:
        orders = list(_all_orders(struct)) if exhaustive else random_interleavings(struct, samples, seed).tolist()
        for order in orders:
            status, detail = _run(struct, order, spec)
            if status != "ok":
                return Verdict(status, detail, "brute-force", len(orders), len(orders), notes)
        return Verdict("ok", "", "brute-force", len(orders), len(orders), notes)

    if exhaustive:
        if len(struct.pairs) > MAX_ORIENTATION_BITS:
            raise ValueError(f"{len(struct.pairs)} conflicting pairs; too many for exhaustive enumeration")
        classes = 0
        for bits in itertools.product((True, False), repeat=len(struct.pairs)):
            order = _linearize(struct, dict(zip(struct.pairs, bits)))
            if order is None:
                continue
            classes += 1
            status, detail = _run(struct, order, spec)
            if status != "ok":
                return Verdict(status, detail, "exhaustive", classes, classes, notes)
        return Verdict("ok", "", "exhaustive", classes, classes, notes)

    orders = random_interleavings(struct, samples, seed)
    if struct.pairs:
        pos = np.empty_like(orders)
        pos[np.arange(samples)[:, None], orders] = np.arange(orders.shape[1])[None, :]
        a = np.array([p[0] for p in struct.pairs])
        b = np.array([p[1] for p in struct.pairs])
        sig = pos[:, a] < pos[:, b]
        _, reps = np.unique(sig, axis=0, return_index=True)
        reps = sorted(reps.tolist())
    else:
        reps = [0]
    for r in reps:
        status, detail = _run(struct, orders[r].tolist(), spec)
        if status != "ok":
            return Verdict(status, detail, "sampled", samples, len(reps), notes)
    return Verdict("ok", "", "sampled", samples, len(reps), notes)


def _all_orders(struct: _Structure):
    """Every merge of the queue chains (factorial; small programs only)."""
    chains = struct.chains

    def rec(idx: list[int], acc: list[int]):
        if len(acc) == len(struct.commands):
            yield list(acc)
            return
        for q, chain in enumerate(chains):
            if idx[q] < len(chain):
                acc.append(chain[idx[q]])
                idx[q] += 1
                yield from rec(idx, acc)
                idx[q] -= 1
                acc.pop()

    yield from rec([0] * len(chains), [])


# -- traffic accounting ------------------------------------------------------


@dataclass
class TrafficReport:
    hbm_read: dict[GpuId, int]
    hbm_write: dict[GpuId, int]
    link_bytes: dict[LinkId, int]

    @property
    def total_read(self) -> int:
        return sum(self.hbm_read.values())

    @property
    def total_write(self) -> int:
        return sum(self.hbm_write.values())

    @property
    def total_link(self) -> int:
        return sum(self.link_bytes.values())


def account_traffic(program: CommandProgram) -> TrafficReport:
    reads: dict[GpuId, int] = defaultdict(int)
    writes: dict[GpuId, int] = defaultdict(int)
    links: dict[LinkId, int] = defaultdict(int)
    for _, _, cmd in program.iter_commands():
        if not cmd.kind.moves_data:
            continue
        for ref in cmd.reads():
            reads[ref.gpu] += ref.length
        for ref in cmd.writes():
            writes[ref.gpu] += ref.length
        for s, d in cmd.transfers():
            if s != d:
                links[LinkId(s, d)] += cmd.size
    return TrafficReport(dict(sorted(reads.items())), dict(sorted(writes.items())), dict(sorted(links.items())))
