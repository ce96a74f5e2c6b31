"""Overhead benchmark over the bundled corpus.

Dynamic overhead is counted in executed instructions. Every inserted
instruction is attributed to one monitor event by walking the trace:
template instructions (origin T1..T6) preceding a monitor visit, the visit
itself, and same-template instructions right after it (the pops closing T4)
form one event. Spill instructions added by the reserved-register rewriter
are counted separately, so on an interrupt-free run

    instrumented = original + sum(event costs) + spill
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

from . import corpus
from .differential import compare_runs
from .errors import CfiError
from .instrument import SPILL_TAG, TEMPLATE_SIZES, TEMPLATE_TAGS
from .isa import DEFAULT_LAYOUT, MemoryLayout
from .machine import Machine
from .monitor import KIND_BY_SELECTOR
from .toolchain import build

EVENT_COLUMNS = ("store_ra", "check_ra", "store_rai", "check_rai", "store_ind", "check_ind")

# Published per-app overheads (binary size %, running time %) and averages,
# shown next to ours for context only: different corpus, monitor and metric.
REFERENCE = {
    "light_sensor": (5.58, 10.36),
    "ultrasonic_ranger": (17.91, 9.98),
    "fire_sensor": (21.51, 13.23),
    "syringe_pump": (12.41, 5.30),
    "temp_sensor": (6.56, 5.57),
    "charlieplexing": (5.23, 4.38),
    "lcd_sensor": (6.29, 2.62),
}
REFERENCE_AVG_SIZE_PCT = 10.78
REFERENCE_AVG_TIME_PCT = 7.35
REFERENCE_STORE_INSNS = 26
REFERENCE_CHECK_INSNS = 29


class BenchError(CfiError):
    pass


@dataclass
class EventSample:
    kind: str
    template: int
    monitor: int
    pc: int
    start: int = 0  # trace index of the first template instruction

    @property
    def cost(self) -> int:
        return self.template + self.monitor


def segment_events(trace, origins: dict[int, str], monitor_calls) -> tuple[list[EventSample], int]:
    """Split an interrupt-free trace into per-event costs; returns (events, spill count)."""
    events: list[EventSample] = []
    spill = 0
    pending = 0
    pending_pc = None
    pending_start = 0
    pending_tag = None
    last_tag = None  # template tag of the event that just returned
    calls = iter(monitor_calls)
    in_mon = False
    for idx, (_, pc, _, secure) in enumerate(trace):
        if secure:
            in_mon = True
            continue
        if in_mon:
            in_mon = False
            selector, count = next(calls)
            events.append(EventSample(KIND_BY_SELECTOR.get(selector, f"sel{selector}"), pending, count,
                                      pending_pc or pc, pending_start))
            last_tag, pending, pending_pc, pending_tag = pending_tag, 0, None, None
        tag = origins.get(pc)
        if tag == SPILL_TAG:
            spill += 1
            last_tag = None
        elif tag in TEMPLATE_TAGS:
            if last_tag == tag and pending == 0:
                events[-1].template += 1
                continue
            if pending == 0:
                pending_pc = pc
                pending_start = idx
            pending += 1
            pending_tag = tag
            last_tag = None
        else:
            last_tag = None
    if pending:
        raise BenchError("trace ended inside a template")
    return events, spill


@dataclass
class AppRow:
    app: str
    instrument_seconds: float
    original_bytes: int
    instrumented_bytes: int
    original_insns: int
    instrumented_insns: int
    irq_original_insns: int
    irq_instrumented_insns: int
    event_counts: dict[str, int] = field(default_factory=dict)
    event_costs: dict[str, int] = field(default_factory=dict)
    check_ind_costs: list[int] = field(default_factory=list)
    spill_insns: int = 0
    iterations: int = 0

    @property
    def size_pct(self) -> float:
        return pct(self.original_bytes, self.instrumented_bytes)

    @property
    def insn_pct(self) -> float:
        return pct(self.original_insns, self.instrumented_insns)

    @property
    def irq_insn_pct(self) -> float:
        return pct(self.irq_original_insns, self.irq_instrumented_insns)

    @property
    def identity_holds(self) -> bool:
        return self.instrumented_insns == self.original_insns + self.event_total + self.spill_insns

    @property
    def event_total(self) -> int:
        total = sum(n * self.event_costs[k] for k, n in self.event_counts.items() if k != "check_ind")
        return total + sum(self.check_ind_costs)


def pct(before: int, after: int) -> float:
    return round(100.0 * (after - before) / before, 2) if before else 0.0


@dataclass
class OverheadReport:
    rows: list[AppRow]
    check_ind_base: int | None = None
    check_ind_stride: int | None = None

    def averages(self) -> tuple[float, float]:
        n = len(self.rows) or 1
        return (round(sum(r.size_pct for r in self.rows) / n, 2), round(sum(r.insn_pct for r in self.rows) / n, 2))

    def event_constants(self) -> dict[str, set[int]]:
        out: dict[str, set[int]] = defaultdict(set)
        for r in self.rows:
            for k, v in r.event_costs.items():
                if k != "check_ind":
                    out[k].add(v)
        return dict(out)

    def csv(self) -> str:
        head = [
            "app", "orig_bytes", "inst_bytes", "size_pct", "orig_insns", "inst_insns", "insn_pct",
            "irq_orig_insns", "irq_inst_insns", "irq_insn_pct", "spill_insns", "iterations",
        ] + [f"cost_{k}" for k in EVENT_COLUMNS if k != "check_ind"] + ["check_ind_costs"] + \
            [f"n_{k}" for k in EVENT_COLUMNS] + ["ref_size_pct", "ref_time_pct"]
        lines = [",".join(head)]
        for r in self.rows:
            ref = REFERENCE.get(r.app, ("", ""))
            cells = [
                r.app, r.original_bytes, r.instrumented_bytes, f"{r.size_pct:.2f}",
                r.original_insns, r.instrumented_insns, f"{r.insn_pct:.2f}",
                r.irq_original_insns, r.irq_instrumented_insns, f"{r.irq_insn_pct:.2f}",
                r.spill_insns, r.iterations,
            ] + [r.event_costs.get(k, "") for k in EVENT_COLUMNS if k != "check_ind"] + \
                [" ".join(map(str, sorted(set(r.check_ind_costs))))] + \
                [r.event_counts.get(k, 0) for k in EVENT_COLUMNS] + [ref[0], ref[1]]
            lines.append(",".join(str(c) for c in cells))
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        size_avg, insn_avg = self.averages()
        lines = [f"apps={len(self.rows)}"]
        for r in self.rows:
            p = f"app.{r.app}."
            lines += [
                f"{p}binary_bytes={r.original_bytes}->{r.instrumented_bytes}",
                f"{p}binary_pct={r.size_pct:.2f}",
                f"{p}insns={r.original_insns}->{r.instrumented_insns}",
                f"{p}insn_pct={r.insn_pct:.2f}",
                f"{p}irq_insn_pct={r.irq_insn_pct:.2f}",
                f"{p}spill_insns={r.spill_insns}",
                f"{p}identity={'ok' if r.identity_holds else 'BROKEN'}",
                f"{p}iterations={r.iterations}",
            ]
        for k, vals in sorted(self.event_constants().items()):
            lines.append(f"event_cost.{k}={','.join(map(str, sorted(vals)))}")
        if self.check_ind_base is not None:
            lines.append(f"event_cost.check_ind={self.check_ind_base}+{self.check_ind_stride}*position")
        lines += [
            f"avg.binary_pct={size_avg:.2f}",
            f"avg.insn_pct={insn_avg:.2f}",
            f"reference.avg_binary_pct={REFERENCE_AVG_SIZE_PCT:.2f}",
            f"reference.avg_time_pct={REFERENCE_AVG_TIME_PCT:.2f}",
            f"reference.store_insns={REFERENCE_STORE_INSNS}",
            f"reference.check_insns={REFERENCE_CHECK_INSNS}",
            "reference.note=published figures use microseconds on hardware; ours are executed instructions",
        ]
        return "\n".join(lines) + "\n"

    def timing_text(self) -> str:
        return "".join(f"app.{r.app}.instrument_seconds={r.instrument_seconds:.4f}\n" for r in self.rows)


def _table_position(image, target: int) -> int | None:
    base = image.symbols.get("__cfi_func_table")
    if base is None:
        return None
    k = 0
    while True:
        w = image.word(base + 2 * k)
        if w == target:
            return k
        k += 1
        if k > 512:
            return None


def bench_app(name: str, source: str, mem: MemoryLayout = DEFAULT_LAYOUT, schedule=(), max_steps: int = 200_000):
    """Build both variants and run them; returns (row, instrumented run, events, instrumented image)."""
    orig = build(source, instrumented=False, mem=mem)
    t0 = time.perf_counter()
    inst = build(source, instrumented=True, mem=mem)
    seconds = time.perf_counter() - t0
    ro = Machine(orig.image).run(max_steps)
    ri = Machine(inst.image, trace=True).run(max_steps)
    problems = compare_runs(ro, ri, mem, (orig.image.symbols, inst.image.symbols))
    if problems:
        raise BenchError(f"{name}: benign run diverged: {problems[0]}")
    events, spill = segment_events(ri.trace, inst.image.origins, ri.monitor_calls)
    counts: dict[str, int] = defaultdict(int)
    costs: dict[str, int] = {}
    ind_costs = []
    for ev in events:
        counts[ev.kind] += 1
        if ev.kind == "check_ind":
            ind_costs.append(ev.cost)
            continue
        if costs.setdefault(ev.kind, ev.cost) != ev.cost:
            raise BenchError(f"{name}: {ev.kind} cost varies ({costs[ev.kind]} vs {ev.cost})")
    sro = Machine(orig.image, schedule).run(max_steps)
    sri = Machine(inst.image, schedule).run(max_steps)
    # ISR events only occur with interrupts; their template part is static
    # and the monitor part comes from the measured ROM segments.
    for selector, count in sri.monitor_calls:
        kind = KIND_BY_SELECTOR.get(selector)
        if kind in ("store_rai", "check_rai"):
            cost = TEMPLATE_SIZES["isr-prologue" if kind == "store_rai" else "isr-epilogue"] + count
            if costs.setdefault(kind, cost) != cost:
                raise BenchError(f"{name}: {kind} cost varies ({costs[kind]} vs {cost})")
            counts.setdefault(kind, 0)
    problems = compare_runs(sro, sri, mem, (orig.image.symbols, inst.image.symbols))
    if problems:
        raise BenchError(f"{name}: benign run with interrupts diverged: {problems[0]}")
    row = AppRow(
        app=name,
        instrument_seconds=seconds,
        original_bytes=inst.report.original_bytes,
        instrumented_bytes=inst.report.instrumented_bytes,
        original_insns=ro.steps,
        instrumented_insns=ri.steps,
        irq_original_insns=sro.steps,
        irq_instrumented_insns=sri.steps,
        event_counts=dict(counts),
        event_costs=costs,
        check_ind_costs=ind_costs,
        spill_insns=spill,
        iterations=inst.report.iterations,
    )
    return row, ri, events, inst.image


def check_ind_model(rows_events) -> tuple[int, int] | None:
    """Fit cost = base + stride * position from (image, events) pairs; None if no samples."""
    points = set()
    for image, trace, events in rows_events:
        for ev in events:
            if ev.kind != "check_ind":
                continue
            target = _indirect_target(trace, ev)
            pos = _table_position(image, target) if target is not None else None
            if pos is not None:
                points.add((pos, ev.cost))
    if not points:
        return None
    pts = sorted(points)
    if len(pts) == 1:
        return pts[0][1], 0
    (p0, c0), (p1, c1) = pts[0], pts[-1]
    stride = (c1 - c0) // (p1 - p0) if p1 != p0 else 0
    base = c0 - stride * p0
    for p, c in pts:
        if c != base + stride * p:
            raise BenchError(f"check_ind cost {c} at position {p} breaks the linear model")
    return base, stride


def _indirect_target(trace, ev: EventSample) -> int | None:
    # the guarded call is the first normal-state call after the T6+T1 blocks;
    # the PC that follows it is the target
    for k in range(ev.start, len(trace) - 1):
        _, pc, mn, secure = trace[k]
        if not secure and mn == "call" and not trace[k + 1][3]:
            return trace[k + 1][1]
    return None


def run_bench(names=None, mem: MemoryLayout = DEFAULT_LAYOUT, schedule_kind: str = "spread",
              sources: dict[str, str] | None = None,
              schedules: dict[str, dict[str, list]] | None = None) -> OverheadReport:
    """Benchmark the corpus (or ``sources``), rows ordered by app name.

    ``schedules`` maps app -> {schedule id -> pairs}; the ``<app>_<kind>``
    schedule drives the with-interrupts columns.
    """
    if sources is None:
        sources = {n: corpus.app_source(n) for n in (names or corpus.app_names())}
        schedules = {n: corpus.schedules(n) for n in sources}
    schedules = schedules or {}
    rows = []
    fits = []
    for name in sorted(sources):
        schedule = schedules.get(name, {}).get(f"{name}_{schedule_kind}", ())
        row, ri, events, image = bench_app(name, sources[name], mem, schedule)
        rows.append(row)
        fits.append((image, ri.trace, events))
    model = check_ind_model(fits)
    report = OverheadReport(rows)
    if model:
        report.check_ind_base, report.check_ind_stride = model
    return report


__all__ = ["AppRow", "BenchError", "EventSample", "OverheadReport", "REFERENCE", "bench_app", "run_bench", "segment_events"]
