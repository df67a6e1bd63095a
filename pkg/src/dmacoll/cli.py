"""Command-line front end: ``dmacoll <subcommand> ...``.

Sizes are per-peer chunk sizes in bytes and accept binary suffixes
(``4K`` = 4096, ``2M``, ``1G``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .calibrate import CalibrationTargets, SearchBudget, calibrate
from .compiler import CollectiveKind, CollectiveSpec, CompileError, compile_collective, implementations
from .costmodel import CostModel, CostModelError, load_cost_model
from .kvfile import ConfigError
from .program import dump_program, listing, static_metrics, validate_program
from .sim import SimulationError, engine_activity_report, phase_breakdown, simulate, simulate_sync_chain
from .sweep import (
    SweepConfig,
    SweepError,
    format_size,
    overlay_reference,
    parse_size,
    run_sweep,
    selection_table,
)
from .topology import NodeTopology, TopologyError, build_topology, load_topology
from .trace import write_trace
from .verifier import account_traffic, verify_collective

log = logging.getLogger("dmacoll")

_KIND_ALIASES = {
    "allgather": CollectiveKind.ALL_GATHER,
    "all-gather": CollectiveKind.ALL_GATHER,
    "ag": CollectiveKind.ALL_GATHER,
    "alltoall": CollectiveKind.ALL_TO_ALL,
    "all-to-all": CollectiveKind.ALL_TO_ALL,
    "aa": CollectiveKind.ALL_TO_ALL,
}


def _kind(text: str) -> CollectiveKind:
    try:
        return _KIND_ALIASES[text.strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown collective {text!r} (allgather or alltoall)") from None


def _size(text: str) -> int:
    try:
        return parse_size(text)
    except SweepError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--topology", default=d(None), help="topology config file")
    p.add_argument("--cost-model", default=d(None), help="cost config file (default: packaged calibration)")
    p.add_argument("--seed", type=int, default=d(0), help="seed for verification and calibration")
    p.add_argument("--jobs", type=int, default=d(1), help="parallel sweep workers")
    p.add_argument("--out", default=d(None), help="output path")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _collective_args(p: argparse.ArgumentParser, size: bool = True) -> None:
    p.add_argument("--collective", type=_kind, required=True)
    p.add_argument("--impl", required=True)
    p.add_argument("--gpus", type=int, default=None, help="GPU count (default: topology, else 8)")
    if size:
        p.add_argument("--size", type=_size, default=4096, help="per-peer chunk size (default 4K)")
    p.add_argument("--in-place", action="store_true", help="all-to-all only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmacoll", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a collective and print its command listing")
    _collective_args(p)
    p.add_argument("--dump-program", metavar="PATH", help="write the listing to PATH")

    p = sub.add_parser("verify", help="check a compiled collective under many interleavings")
    _collective_args(p)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--brute-force", action="store_true", help="execute every ordering, no trace-class reduction")

    p = sub.add_parser("simulate", help="simulate one collective and print its phase breakdown")
    _collective_args(p)
    p.add_argument("--trace", metavar="PATH", help="write trace-event JSON")
    p.add_argument("--gemm-ns", type=float, default=None, help="prepend a producer kernel (prelaunched impls)")

    p = sub.add_parser("sweep", help="sweep sizes and write CSV")
    p.add_argument("--collective", type=_kind, required=True)
    p.add_argument("--impls", default=None, help="comma-separated (default: all valid)")
    p.add_argument("--gpus", type=int, default=None)
    p.add_argument("--start", type=_size, default=1024)
    p.add_argument("--end", type=_size, default=4 * 1024**3)
    p.add_argument("--step", type=float, default=2.0)
    p.add_argument("--window", action="append", default=None, metavar="LO:HI",
                   help="size window for geomean speedups (repeatable; default 1K:32M)")
    p.add_argument("--summary", metavar="PATH", help="write the JSON summary here")
    p.add_argument("--no-verify", action="store_true")

    p = sub.add_parser("select", help="best implementation per size vs the reference table")
    p.add_argument("--collective", type=_kind, required=True)
    p.add_argument("--gpus", type=int, default=None)
    p.add_argument("--strict", action="store_true", help="exit 1 on any mismatch")

    p = sub.add_parser("calibrate", help="fit cost parameters and write a cost config")
    p.add_argument("--samples", type=int, default=SearchBudget.single_copy_samples)
    p.add_argument("--keep", type=int, default=SearchBudget.keep)
    p.add_argument("--collective-samples", type=int, default=SearchBudget.collective_samples)
    p.add_argument("--refine", type=int, default=SearchBudget.refine_steps)
    p.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE",
                   help="pin a cost parameter, e.g. engine_throughput_cap=64e9")

    p = sub.add_parser("overlay", help="join a sweep CSV with reference times")
    p.add_argument("sweep_csv")
    p.add_argument("reference_csv")

    for sp in sub.choices.values():
        _global_flags(sp, suppress=True)
    return parser


def _topology(args, gpus: Optional[int]) -> NodeTopology:
    if args.topology:
        topo = load_topology(args.topology)
        if gpus is not None and gpus != topo.gpu_count:
            topo = build_topology(gpus, {
                "engines_per_gpu": topo.engines_per_gpu,
                "link_bandwidth": topo.link_bandwidth,
                "engine_throughput_cap": topo.engine_throughput_cap,
            })
        return topo
    return build_topology(gpus or 8)


def _cost(args) -> CostModel:
    return load_cost_model(args.cost_model)


def _program(args, topo):
    spec = CollectiveSpec(args.collective, args.size, topo.gpu_count, in_place=args.in_place)
    return spec, compile_collective(spec, args.impl, topo)


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_compile(args) -> int:
    topo = _topology(args, args.gpus)
    _, prog = _program(args, topo)
    viol = validate_program(prog, topo)
    if args.dump_program:
        dump_program(prog, args.dump_program)
    _emit(args, listing(prog))
    m = static_metrics(prog)
    print(
        f"# {prog.name}: {m.data_commands} data, {m.sync_commands} sync, {m.poll_commands} poll, "
        f"{m.engines_used} engines, {m.doorbells} doorbells",
        file=sys.stderr,
    )
    if viol is not None:
        print(f"invalid program: {viol}", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    topo = _topology(args, args.gpus)
    spec, prog = _program(args, topo)
    viol = validate_program(prog, topo)
    if viol is not None:
        print(f"INVALID: {viol}")
        return 1
    verdict = verify_collective(prog, seed=args.seed, samples=args.samples, brute_force=args.brute_force)
    print(f"{prog.name} {spec.kind.value} n={spec.gpu_count} size={format_size(spec.chunk_size)}: {verdict}")
    for note in verdict.notes:
        print(f"note: {note}")
    return 0 if verdict.ok else 1


def cmd_simulate(args) -> int:
    topo = _topology(args, args.gpus)
    cost = _cost(args)
    _, prog = _program(args, topo)
    viol = validate_program(prog, topo)
    if viol is not None:
        print(f"invalid program: {viol}", file=sys.stderr)
        return 1
    if args.gemm_ns is not None:
        tl = simulate_sync_chain(args.gemm_ns, prog, topo, cost)
    else:
        tl = simulate(prog, topo, cost)
    lines = [f"{prog.name} total_ns={tl.total!r}"]
    fr = phase_breakdown(tl)
    for phase, ns in tl.phase_totals().items():
        if ns > 0:
            lines.append(f"  {phase:<8} {ns:14.3f} ns  {100 * fr[phase]:6.2f}%")
    if tl.sync_chain is not None:
        lines.append(f"  sync-chain overhead {tl.sync_chain.overhead_ns:.3f} ns")
    act = engine_activity_report(tl)
    tr = account_traffic(prog)
    lines.append(f"  engines={act.engines_used} busy_ns={act.busy_ns:.3f} spread_ns={act.busy_spread_ns:.3f}")
    lines.append(f"  hbm_read={tr.total_read} hbm_write={tr.total_write} link_bytes={tr.total_link}")
    _emit(args, "\n".join(lines) + "\n")
    if args.trace:
        write_trace(tl, args.trace)
    return 0


def cmd_sweep(args) -> int:
    topo = _topology(args, args.gpus)
    impls = args.impls.split(",") if args.impls else implementations(args.collective)
    windows = []
    for w in args.window or ["1K:32M"]:
        lo, _, hi = w.partition(":")
        windows.append((parse_size(lo), parse_size(hi)))
    config = SweepConfig(
        kind=args.collective, impls=[i.strip() for i in impls], topology=topo, cost=_cost(args),
        start=args.start, end=args.end, step=args.step, seed=args.seed, jobs=args.jobs,
        verify=not args.no_verify, windows=windows,
    )
    result = run_sweep(config)
    _emit(args, result.csv_text())
    if args.summary:
        Path(args.summary).write_text(result.summary_json())
    return 0


def cmd_select(args) -> int:
    topo = _topology(args, args.gpus)
    table = selection_table(args.collective, topo, _cost(args))
    _emit(args, table.format())
    return 1 if args.strict and not table.ok else 0


def cmd_calibrate(args) -> int:
    fixed = {}
    for item in args.fix:
        name, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--fix expects NAME=VALUE, got {item!r}")
        fixed[name.strip()] = float(val)
    topo = _topology(args, None)
    targets = CalibrationTargets(gpu_count=topo.gpu_count, fixed=fixed)
    budget = SearchBudget(args.samples, args.keep, args.collective_samples, args.refine)
    res = calibrate(targets, seed=args.seed, budget=budget, topology=topo,
                    progress=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    header = "\n".join([
        "calibrated cost model (dmacoll calibrate)",
        f"seed = {res.seed}",
        f"budget = {budget.single_copy_samples}/{budget.keep}/{budget.collective_samples}/{budget.refine_steps}",
        f"evaluations = {res.evaluations}",
        f"residual = {res.residual!r}",
        f"satisfied = {res.satisfied}",
    ])
    _emit(args, res.model.dumps(header))
    report = res.report() + "\n" + "\n".join(res.log) + "\n"
    if args.out:
        Path(str(args.out) + ".log").write_text(report)
    print(report, file=sys.stderr, end="")
    return 0 if res.satisfied else 1


def cmd_overlay(args) -> int:
    res = overlay_reference(args.sweep_csv, args.reference_csv)
    _emit(args, res.csv_text())
    for msg in res.problems:
        print(f"warning: {msg}", file=sys.stderr)
    return 0


COMMANDS = {
    "compile": cmd_compile,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "select": cmd_select,
    "calibrate": cmd_calibrate,
    "overlay": cmd_overlay,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CompileError, CostModelError, ConfigError, TopologyError, SweepError, SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
