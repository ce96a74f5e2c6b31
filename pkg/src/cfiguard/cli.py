"""Command-line entry point: instrument, build, run, attack, bench.

Exit codes: 0 success / clean halt, 1 toolchain error, 2 usage error,
3 violation (run) or failing scenario (attack), 4 step limit reached.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CfiError
from .isa import DEFAULT_LAYOUT, MemoryImage, MemoryLayout, assemble, format_asm, format_listing, layout, parse_asm

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_VIOLATION, EXIT_STEP_LIMIT = 0, 1, 2, 3, 4
OUTCOME_EXIT = {"halt": EXIT_OK, "violation": EXIT_VIOLATION, "step-limit": EXIT_STEP_LIMIT}

log = logging.getLogger("cfiguard")


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def layout_from_args(args) -> tuple[MemoryLayout, int | None]:
    """Apply --shadow-base/--shadow-slots/--rom-base to the default map."""
    mem = DEFAULT_LAYOUT
    slots = args.shadow_slots
    kw = {}
    if args.shadow_base is not None or slots is not None:
        base = args.shadow_base if args.shadow_base is not None else mem.secure[0]
        n = slots if slots is not None else (mem.secure[1] - mem.secure[0] + 1) // 2
        if n <= 0:
            raise UsageError("--shadow-slots must be positive")
        kw["secure"] = (base, base + 2 * n - 1)
        kw["secure_meta"] = (base + 2 * n, base + 2 * n + 15)
    if args.rom_base is not None:
        size = mem.rom[1] - mem.rom[0]
        kw["rom"] = (args.rom_base, args.rom_base + size)
    if kw:
        try:
            mem = MemoryLayout(**{**{k: getattr(mem, k) for k in mem.__dataclass_fields__}, **kw})
        except ValueError as exc:
            raise UsageError(f"invalid layout override: {exc}") from None
    return mem, slots


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_text()


def _prefixed(path: str, exc: Exception) -> str:
    return f"{path}: {exc}"


# commands -------------------------------------------------------------------


def cmd_instrument(args) -> int:
    from .instrument import instrument, rewrite_reserved_registers

    mem, _ = layout_from_args(args)
    src = _read(args.input)
    try:
        prog = parse_asm(src)
        prog, warnings = rewrite_reserved_registers(prog, forbid=args.forbid_reserved_regs)
        prog, report = instrument(prog, mem)
    except CfiError as exc:
        print(_prefixed(args.input, exc), file=sys.stderr)
        return EXIT_ERROR
    report.warnings = warnings + report.warnings
    for w in report.warnings:
        print(f"{args.input}: warning: {w}", file=sys.stderr)
    Path(args.output).write_text(format_asm(prog))
    if args.report:
        Path(args.report).write_text(report.to_text())
    print(f"instrumented {args.input} -> {args.output} ({report.iterations} iterations, "
          f"{report.original_bytes} -> {report.instrumented_bytes} bytes)")
    return EXIT_OK


def cmd_build(args) -> int:
    from .instrument import instrument, rewrite_reserved_registers
    from .monitor import MonitorConfig, generate_monitor
    from .toolchain import link

    mem, slots = layout_from_args(args)
    src = _read(args.input)
    try:
        prog = parse_asm(src)
        if not args.no_instrument and not prog.has_directive("instrumented"):
            prog, _ = rewrite_reserved_registers(prog, forbid=args.forbid_reserved_regs)
            prog, _ = instrument(prog, mem)
        linked = link(prog, generate_monitor(MonitorConfig.from_layout(mem, slots)))
        image = assemble(linked, mem)
    except (CfiError, ValueError) as exc:
        print(_prefixed(args.input, exc), file=sys.stderr)
        return EXIT_ERROR
    image.save(args.output)
    if args.listing:
        Path(args.listing).write_text(format_listing(linked, layout(linked, mem)))
    print(f"built {args.output} (reset vector 0x{image.word(mem.reset_vector):04X})")
    return EXIT_OK


def _load_image(path: str, mem: MemoryLayout) -> MemoryImage:
    if not Path(path).is_file():
        raise UsageError(f"no such image: {path}")
    return MemoryImage.load(path, mem)


def cmd_run(args) -> int:
    from .machine import Machine, parse_schedule

    mem, _ = layout_from_args(args)
    image = _load_image(args.image, mem)
    if image.word(mem.reset_vector) == 0 and "__reset" not in image.symbols and "main" not in image.symbols:
        print(f"{args.image}: missing reset vector", file=sys.stderr)
        return EXIT_ERROR
    schedule = []
    if args.schedule:
        try:
            schedule = parse_schedule(_read(args.schedule))
        except CfiError as exc:
            print(_prefixed(args.schedule, exc), file=sys.stderr)
            return EXIT_ERROR
    m = Machine(image, schedule, trace=args.trace is not None)
    res = m.run(args.max_steps)
    if args.trace is not None:
        text = res.format_trace()
        if args.trace == "-":
            sys.stdout.write(text)
        else:
            Path(args.trace).write_text(text)
    print(f"outcome={res.outcome}")
    print(f"outputs={','.join(str(v) for v in res.outputs)}")
    print(f"instructions={res.steps}")
    print(f"normal_instructions={res.normal_steps}")
    print(f"secure_instructions={res.secure_steps}")
    print(f"violations={len(res.violations)}")
    for v in res.violations:
        print(f"violation={v}")
    return OUTCOME_EXIT[res.outcome]


def cmd_attack(args) -> int:
    from .attacks import execute_scenario, image_for, load_scenario
    from .machine import parse_schedule

    mem, _ = layout_from_args(args)
    paths: list[Path] = []
    for s in args.scenarios:
        p = Path(s)
        if p.is_dir():
            found = sorted(p.glob("*.scn"))
            if not found:
                raise UsageError(f"no .scn files in {s}")
            paths += found
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"no such scenario: {s}")
    image = _load_image(args.image, mem) if args.image else None
    schedule = parse_schedule(_read(args.schedule)) if args.schedule else ()
    cache: dict = {}
    failures = 0
    for p in paths:
        try:
            scn = load_scenario(p)
            if image is not None:
                img, sched = image, schedule
            else:
                img, sched = image_for(scn, cache)
            verdict = execute_scenario(scn, img, sched, args.max_steps)
        except CfiError as exc:
            print(_prefixed(str(p), exc), file=sys.stderr)
            failures += 1
            continue
        print(verdict)
        failures += not verdict.passed
    print(f"passed={len(paths) - failures}/{len(paths)}")
    return EXIT_OK if failures == 0 else EXIT_VIOLATION


def cmd_bench(args) -> int:
    from .bench import BenchError, run_bench
    from .machine import parse_schedule

    mem, _ = layout_from_args(args)
    sources = schedules = None
    if args.corpus:
        root = Path(args.corpus)
        app_dir = root / "apps" if (root / "apps").is_dir() else root
        files = sorted(app_dir.glob("*.s"))
        if not files:
            raise UsageError(f"no .s apps under {args.corpus}")
        sources = {f.stem: f.read_text() for f in files}
        sched_dir = root / "schedules"
        schedules = {
            name: {p.stem: parse_schedule(p.read_text()) for p in sorted(sched_dir.glob(f"{name}_*.irq"))}
            for name in sources
        } if sched_dir.is_dir() else {}
    try:
        report = run_bench(mem=mem, sources=sources, schedules=schedules)
    except (BenchError, CfiError) as exc:
        print(f"bench aborted: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.text())
    (out / "report.csv").write_text(report.csv())
    (out / "timing.txt").write_text(report.timing_text())
    if not args.no_plots:
        from .plotting import plot_overheads

        plot_overheads(report, out)
    sys.stdout.write(report.text())
    return EXIT_OK


# parser ---------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cfiguard", description="Shadow-stack CFI toolchain for an MSP430-class MCU")
    ap.add_argument("--shadow-base", type=_int, help="first byte of the shadow-stack region")
    ap.add_argument("--shadow-slots", type=_int, help="shadow-stack capacity in 16-bit slots")
    ap.add_argument("--rom-base", type=_int, help="first byte of monitor ROM")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("instrument", help="insert CFI templates into an assembly file")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report", help="write the key=value instrumentation report here")
    p.add_argument("--forbid-reserved-regs", action="store_true", help="reject any use of r4-r7 instead of spilling")
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("build", help="instrument (unless told not to), link the monitor and assemble")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True, help="raw image path; a .sym sidecar is written next to it")
    p.add_argument("--no-instrument", action="store_true", help="link the original program only")
    p.add_argument("--forbid-reserved-regs", action="store_true")
    p.add_argument("--listing", help="write an address listing")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("run", help="execute an image on the emulator")
    p.add_argument("image")
    p.add_argument("--schedule", help="interrupt schedule file")
    p.add_argument("--trace", nargs="?", const="-", help="write a per-step trace (default: stdout)")
    p.add_argument("--max-steps", type=int, default=200_000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="run attack scenarios")
    p.add_argument("scenarios", nargs="+", help="scenario files or directories")
    p.add_argument("--image", help="run every scenario against this image instead of building its target")
    p.add_argument("--schedule", help="interrupt schedule used with --image")
    p.add_argument("--max-steps", type=int, default=50_000)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="overhead benchmark over a corpus")
    p.add_argument("--corpus", help="directory with apps/ and schedules/ (default: bundled corpus)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CfiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
