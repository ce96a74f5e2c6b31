"""Memory map and address assignment."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import AsmError, LayoutError
from .model import AsmProgram, Directive, Instruction, Label, vector_id


@dataclass(frozen=True)
class MemoryLayout:
    """Region bounds (inclusive) of the 64 KiB address space."""

    mmio: tuple[int, int] = (0x0100, 0x01FF)
    dmem: tuple[int, int] = (0x0200, 0x0FFF)
    secure: tuple[int, int] = (0x2000, 0x20FF)
    # monitor bookkeeping words (saved SR, function-table base/count)
    secure_meta: tuple[int, int] = (0x2100, 0x210F)
    rom: tuple[int, int] = (0xA000, 0xA3FF)
    pmem: tuple[int, int] = (0xE000, 0xFFDF)
    ivt: tuple[int, int] = (0xFFE0, 0xFFFF)
    output_port: int = 0x0180
    halt_port: int = 0x0182
    trigger: int = 0x0190

    def __post_init__(self):
        regions = sorted(self.regions().items(), key=lambda kv: kv[1][0])
        for name, (lo, hi) in regions:
            if not (0 <= lo <= hi <= 0xFFFF):
                raise ValueError(f"bad bounds for {name}: {lo:#x}..{hi:#x}")
        for (n1, (_, hi1)), (n2, (lo2, _)) in zip(regions, regions[1:]):
            if hi1 >= lo2:
                raise ValueError(f"regions {n1} and {n2} overlap")
        for port in (self.output_port, self.halt_port, self.trigger):
            if not self.mmio[0] <= port <= self.mmio[1]:
                raise ValueError(f"port {port:#x} outside MMIO")
        if self.ivt[1] != 0xFFFF:
            raise ValueError("the vector table must end at 0xFFFF")

    def regions(self) -> dict[str, tuple[int, int]]:
        return {
            "mmio": self.mmio,
            "dmem": self.dmem,
            "secure": self.secure,
            "secure_meta": self.secure_meta,
            "rom": self.rom,
            "pmem": self.pmem,
            "ivt": self.ivt,
        }

    def region_of(self, addr: int) -> str | None:
        for name, (lo, hi) in self.regions().items():
            if lo <= addr <= hi:
                return name
        return None

    @property
    def reset_vector(self) -> int:
        return 0xFFFE

    @property
    def stack_top(self) -> int:
        return self.dmem[1] + 1

    def vector_address(self, vid: int) -> int:
        addr = self.ivt[0] + 2 * vid
        if not self.ivt[0] <= addr < self.ivt[1]:
            raise LayoutError(f"vector {vid} outside the vector table")
        return addr

    def vector_count(self) -> int:
        return (self.ivt[1] - self.ivt[0] + 1) // 2

    def is_secure(self, addr: int) -> bool:
        return self.secure[0] <= addr <= self.secure[1] or self.secure_meta[0] <= addr <= self.secure_meta[1]


DEFAULT_LAYOUT = MemoryLayout()


def item_size(item) -> int:
    if isinstance(item, Instruction):
        return item.size
    if isinstance(item, Directive):
        if item.name == "word":
            return 2 * len(item.args)
        if item.name == "byte":
            return len(item.args)
    return 0


def section_region(section: str, mem: MemoryLayout) -> tuple[int, int]:
    if section == "text":
        return mem.pmem
    if section == "monitor":
        return mem.rom
    if section == "data":
        return mem.dmem
    vid = vector_id(section)
    if vid is not None:
        a = mem.vector_address(vid)
        return a, a + 1
    raise LayoutError(f"unknown section {section!r}")


def layout(prog: AsmProgram, mem: MemoryLayout = DEFAULT_LAYOUT) -> dict[int, int]:
    """Assign an address to every item.

    Each section is placed sequentially from the base of its region; an
    item's address is the previous address plus the previous item's size.
    """
    cursors: dict[str, int] = {}
    out: dict[int, int] = {}
    for i, section, item in prog.sections():
        lo, hi = section_region(section, mem)
        cur = cursors.get(section, lo)
        size = item_size(item)
        if isinstance(item, Directive) and item.name == "byte":
            if section in ("text", "monitor"):
                raise AsmError(".byte is not allowed in code sections", item.line)
        elif size and cur & 1:
            cur += 1
        if cur + size - 1 > hi:
            raise LayoutError(
                f"section {section} overflows its region at item {i} "
                f"({cur:#06x}+{size} > {hi:#06x})"
            )
        out[i] = cur
        cursors[section] = cur + size
    return out


def symbols_from(prog: AsmProgram, addrs: dict[int, int]) -> dict[str, int]:
    return {item.name: addrs[i] for i, item in enumerate(prog.items) if isinstance(item, Label)}


def format_listing(prog: AsmProgram, addrs: dict[int, int]) -> str:
    """``ADDRESS<TAB>SIZE<TAB>SOURCE-LINE`` for every item."""
    from .parser import format_item

    lines = []
    for i, item in enumerate(prog.items):
        lines.append(f"{addrs[i]:04X}\t{item_size(item)}\t{format_item(item).strip()}")
    return "\n".join(lines) + ("\n" if lines else "")
