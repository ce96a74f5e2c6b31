"""End-to-end build: parse, spill, instrument, link with the monitor, assemble."""

from __future__ import annotations

from dataclasses import dataclass, field

from .instrument import InstrumentationReport, instrument, rewrite_reserved_registers
from .isa import DEFAULT_LAYOUT, AsmProgram, MemoryImage, MemoryLayout, assemble, parse_asm
from .monitor import MonitorConfig, MonitorFragment, generate_monitor


@dataclass
class Build:
    app: AsmProgram
    linked: AsmProgram
    image: MemoryImage
    monitor: MonitorFragment
    report: InstrumentationReport | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def instrumented(self) -> bool:
        return self.report is not None


def link(app: AsmProgram, monitor: MonitorFragment) -> AsmProgram:
    return app + monitor.program


def build(source: str | AsmProgram, instrumented: bool = True, mem: MemoryLayout = DEFAULT_LAYOUT,
          capacity: int | None = None, forbid_reserved: bool = False) -> Build:
    prog = parse_asm(source) if isinstance(source, str) else source
    fragment = generate_monitor(MonitorConfig.from_layout(mem, capacity))
    warnings: list[str] = []
    report = None
    if instrumented:
        prog, warnings = rewrite_reserved_registers(prog, forbid=forbid_reserved)
        prog, report = instrument(prog, mem)
        report.warnings = warnings + report.warnings
        warnings = report.warnings
    linked = link(prog, fragment)
    return Build(prog, linked, assemble(linked, mem), fragment, report, warnings)


__all__ = ["Build", "build", "link"]
