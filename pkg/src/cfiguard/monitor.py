"""Trusted monitor: generated assembly fragment plus a native reference model.

The fragment lives in monitor ROM and has three parts. ``MON_ENTRY`` saves
SR and dispatches on r4. The six routines work over the shadow stack, whose
next free slot is ``base + 2*r5``. ``S_EILID_exit`` restores SR and returns
to the instrumented caller. Every failed check writes a reason code to the
violation trigger, which the hardware turns into a reset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

from .isa import AsmProgram, MemoryLayout, Mode, parse_asm
from .isa.layout import DEFAULT_LAYOUT

# r4 selector values used by the instrumentation templates
STORE_RA, CHECK_RA, STORE_RAI, CHECK_RAI, STORE_IND, CHECK_IND = 1, 2, 3, 4, 5, 6
SELECTORS = {
    "store_ra": STORE_RA,
    "check_ra": CHECK_RA,
    "store_rai": STORE_RAI,
    "check_rai": CHECK_RAI,
    "store_ind": STORE_IND,
    "check_ind": CHECK_IND,
}
EVENT_KINDS = tuple(SELECTORS)
KIND_BY_SELECTOR = {v: k for k, v in SELECTORS.items()}

# reason codes written to the violation trigger
CODE_REASONS = {
    1: "return-address-mismatch",
    2: "interrupt-context-mismatch",
    3: "indirect-call-target",
    4: "overflow",
    5: "underflow",
    6: "bad-selector",
}
REASON_CODES = {v: k for k, v in CODE_REASONS.items()}

ENTRY_LABEL = "MON_ENTRY"
ROUTINES = {
    "store_ra": "S_EILID_store_ra",
    "check_ra": "S_EILID_check_ra",
    "store_rai": "S_EILID_store_rai",
    "check_rai": "S_EILID_check_rai",
    "store_ind": "S_EILID_store_ind_func",
    "check_ind": "S_EILID_check_ind_func",
}
EXIT_LABEL = "S_EILID_exit"


@dataclass(frozen=True)
class MonitorConfig:
    shadow_base: int = 0x2000
    capacity: int = 128
    rom_base: int = 0xA000
    trigger: int = 0x0190
    meta_base: int = 0x2100
    selectors: dict = field(default_factory=lambda: dict(SELECTORS))

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("shadow stack capacity must be positive")
        if self.shadow_base & 1 or self.meta_base & 1:
            raise ValueError("shadow base and meta base must be word aligned")
        if self.capacity > 0x7FFF:
            raise ValueError("capacity too large")

    @classmethod
    def from_layout(cls, mem: MemoryLayout, capacity: int | None = None) -> "MonitorConfig":
        size = mem.secure[1] - mem.secure[0] + 1
        cap = size // 2 if capacity is None else capacity
        cfg = cls(
            shadow_base=mem.secure[0],
            capacity=cap,
            rom_base=mem.rom[0],
            trigger=mem.trigger,
            meta_base=mem.secure_meta[0],
        )
        if cap * 2 > size:
            raise ValueError(f"{cap} slots do not fit the {size}-byte secure region")
        if mem.secure_meta[1] - mem.secure_meta[0] + 1 < 6:
            raise ValueError("secure meta region needs at least 6 bytes")
        return cfg

    @property
    def sr_save(self) -> int:
        return self.meta_base

    @property
    def table_base_addr(self) -> int:
        return self.meta_base + 2

    @property
    def table_count_addr(self) -> int:
        return self.meta_base + 4


@dataclass
class MonitorFragment:
    program: AsmProgram
    config: MonitorConfig
    entry: str = ENTRY_LABEL
    body: tuple[str, ...] = tuple(ROUTINES.values())
    exit: str = EXIT_LABEL

    def text(self) -> str:
        from .isa import format_asm

        return format_asm(self.program)


def _h(v: int) -> str:
    return f"0x{v & 0xFFFF:04X}"


def generate_monitor(cfg: MonitorConfig = MonitorConfig()) -> MonitorFragment:
    """Emit the monitor fragment for ``cfg``."""
    if cfg.capacity <= 0:
        raise ValueError("capacity must be positive")
    base, cap, trig = cfg.shadow_base, cfg.capacity, _h(cfg.trigger)
    sel = cfg.selectors
    dispatch = "\n".join(
        f"\tcmp\t#{sel[kind]}, r4\n\tjeq\t{ROUTINES[kind]}" for kind in EVENT_KINDS
    )
    src = f"""
\t.section .monitor
{ENTRY_LABEL}:
\tmov\tr2, &{_h(cfg.sr_save)}
{dispatch}
\tmov\t#6, &{trig}
\tjmp\t$

{ROUTINES['store_ra']}:
\tcmp\t#{cap}, r5
\tjc\t__mon_overflow
\tmov\tr5, r4
\tadd\tr4, r4
\tmov\tr6, {_h(base)}(r4)
\tinc\tr5
\tjmp\t{EXIT_LABEL}

{ROUTINES['check_ra']}:
\tcmp\t#0, r5
\tjeq\t__mon_underflow
\tdec\tr5
\tmov\tr5, r4
\tadd\tr4, r4
\tcmp\t{_h(base)}(r4), r6
\tjne\t__mon_ra_mismatch
\tjmp\t{EXIT_LABEL}

{ROUTINES['store_rai']}:
\tcmp\t#{cap - 1}, r5
\tjc\t__mon_overflow
\tmov\tr5, r4
\tadd\tr4, r4
\tmov\tr6, {_h(base)}(r4)
\tmov\tr7, {_h(base + 2)}(r4)
\tadd\t#2, r5
\tjmp\t{EXIT_LABEL}

{ROUTINES['check_rai']}:
\tcmp\t#2, r5
\tjnc\t__mon_underflow
\tsub\t#2, r5
\tmov\tr5, r4
\tadd\tr4, r4
\tcmp\t{_h(base + 2)}(r4), r7
\tjne\t__mon_irq_mismatch
\tcmp\t{_h(base)}(r4), r6
\tjne\t__mon_irq_mismatch
\tjmp\t{EXIT_LABEL}

{ROUTINES['store_ind']}:
\tmov\tr6, &{_h(cfg.table_base_addr)}
\tmov\tr7, &{_h(cfg.table_count_addr)}
\tjmp\t{EXIT_LABEL}

{ROUTINES['check_ind']}:
\tmov\t&{_h(cfg.table_base_addr)}, r4
\tmov\t&{_h(cfg.table_count_addr)}, r7
__mon_scan:
\tcmp\t#0, r7
\tjeq\t__mon_ind_fail
\tcmp\t@r4+, r6
\tjeq\t{EXIT_LABEL}
\tdec\tr7
\tjmp\t__mon_scan

__mon_ra_mismatch:
\tmov\t#1, &{trig}
\tjmp\t$
__mon_irq_mismatch:
\tmov\t#2, &{trig}
\tjmp\t$
__mon_ind_fail:
\tmov\t#3, &{trig}
\tjmp\t$
__mon_overflow:
\tmov\t#4, &{trig}
\tjmp\t$
__mon_underflow:
\tmov\t#5, &{trig}
\tjmp\t$

{EXIT_LABEL}:
\tmov\t&{_h(cfg.sr_save)}, r2
\tret
"""
    return MonitorFragment(parse_asm(src), cfg)


def loads_index_from_memory(fragment: MonitorFragment) -> bool:
    """True if any fragment instruction loads r5 from memory."""
    for _, ins in fragment.program.instructions():
        ops = ins.operands
        if not ops:
            continue
        dst = ops[-1]
        if dst.mode is Mode.REGISTER and dst.reg == 5 and ins.mnemonic in ("mov", "add", "sub", "and", "bis", "xor", "pop"):
            src = ops[0]
            if ins.mnemonic == "pop" or src.mode not in (Mode.REGISTER, Mode.IMMEDIATE):
                return True
    return False


# reference model ------------------------------------------------------------


@dataclass(frozen=True)
class MonitorEvent:
    """One monitor invocation: kind plus its r6/r7 arguments.

    ``table`` carries the PMEM table contents for ``store_ind`` so the model
    does not need a memory image.
    """

    kind: str
    a: int = 0
    b: int = 0
    table: tuple[int, ...] = ()

    @property
    def selector(self) -> int:
        return SELECTORS[self.kind]


class Verdict(NamedTuple):
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.reason is None

    def __str__(self):
        return "ok" if self.reason is None else f"violation({self.reason})"


OK = Verdict()


@dataclass(frozen=True)
class ShadowStackModel:
    """Value-semantics model of the secure region.

    ``slots`` keeps stale words after pops, exactly like memory does, so the
    packed bytes can be compared with an emulated secure region.
    """

    capacity: int = 128
    slots: tuple[int, ...] = ()
    tags: tuple[str | None, ...] = ()
    index: int = 0
    table_base: int = 0
    table_count: int = 0
    table: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.slots:
            object.__setattr__(self, "slots", (0,) * self.capacity)
            object.__setattr__(self, "tags", (None,) * self.capacity)
        if not 0 <= self.index <= self.capacity:
            raise ValueError("index out of range")

    def top(self) -> int | None:
        return self.slots[self.index - 1] if self.index else None

    def region_bytes(self) -> bytes:
        return struct.pack(f"<{len(self.slots)}H", *self.slots)

    def _put(self, pairs: Iterable[tuple[int, int, str]], index: int) -> "ShadowStackModel":
        slots, tags = list(self.slots), list(self.tags)
        for pos, word, tag in pairs:
            slots[pos] = word & 0xFFFF
            tags[pos] = tag
        return replace(self, slots=tuple(slots), tags=tuple(tags), index=index)


def oracle_apply(model: ShadowStackModel, event: MonitorEvent) -> tuple[ShadowStackModel, Verdict]:
    kind, i, cap = event.kind, model.index, model.capacity
    if kind == "store_ra":
        if i >= cap:
            return model, Verdict("overflow")
        return model._put([(i, event.a, "ra")], i + 1), OK
    if kind == "check_ra":
        if i == 0:
            return model, Verdict("underflow")
        m = replace(model, index=i - 1)
        if model.slots[i - 1] != event.a & 0xFFFF:
            return m, Verdict("return-address-mismatch")
        return m, OK
    if kind == "store_rai":
        if i >= cap - 1:
            return model, Verdict("overflow")
        return model._put([(i, event.a, "irq-pc"), (i + 1, event.b, "irq-sr")], i + 2), OK
    if kind == "check_rai":
        if i < 2:
            return model, Verdict("underflow")
        m = replace(model, index=i - 2)
        # stored PC then SR, so SR is checked first
        if model.slots[i - 1] != event.b & 0xFFFF or model.slots[i - 2] != event.a & 0xFFFF:
            return m, Verdict("interrupt-context-mismatch")
        return m, OK
    if kind == "store_ind":
        return replace(model, table_base=event.a & 0xFFFF, table_count=event.b & 0xFFFF, table=tuple(event.table)), OK
    if kind == "check_ind":
        if event.a & 0xFFFF in model.table[: model.table_count]:
            return model, OK
        return model, Verdict("indirect-call-target")
    raise ValueError(f"unknown monitor event {kind!r}")


def replay(events: Sequence[MonitorEvent], model: ShadowStackModel | None = None, capacity: int = 128):
    """Apply events in order; stops after the first violation (the device resets).

    Returns a list of (verdict, model-after) pairs.
    """
    model = model or ShadowStackModel(capacity)
    out = []
    for ev in events:
        model, verdict = oracle_apply(model, ev)
        out.append((verdict, model))
        if not verdict.ok:
            break
    return out


__all__ = [
    "MonitorConfig",
    "MonitorEvent",
    "MonitorFragment",
    "ShadowStackModel",
    "Verdict",
    "generate_monitor",
    "oracle_apply",
    "replay",
]
