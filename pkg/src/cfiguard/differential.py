"""Run monitor events on the emulated fragment and compare with the oracle."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from .isa import DEFAULT_LAYOUT, MemoryLayout, assemble, parse_asm
from .machine import Machine
from .monitor import (
    MonitorConfig,
    MonitorEvent,
    ShadowStackModel,
    Verdict,
    generate_monitor,
    oracle_apply,
)

TABLE_SLOTS = 16

_DRIVER = f"""
\t.text
__reset:
\tmov\t#0x1000, r1
__drv:
\tcall\t#MON_ENTRY
\tjmp\t$
__drv_table:
\t.word\t{", ".join(["0"] * TABLE_SLOTS)}
"""


@dataclass
class EmulatedMonitor:
    """Generated fragment plus a two-instruction driver, ready for event replay."""

    mem: MemoryLayout = DEFAULT_LAYOUT
    capacity: int | None = None
    cfg: MonitorConfig = field(init=False)
    machine: Machine = field(init=False)

    def __post_init__(self):
        self.cfg = MonitorConfig.from_layout(self.mem, self.capacity)
        image = assemble(parse_asm(_DRIVER) + generate_monitor(self.cfg).program, self.mem)
        self.machine = Machine(image, reset_on_violation=False)
        self.driver = image.symbols["__drv"]
        self.table_addr = image.symbols["__drv_table"]

    def normalize(self, ev: MonitorEvent) -> MonitorEvent:
        """store_ind always registers the driver's table; the contents come from the event."""
        if ev.kind == "store_ind":
            table = tuple(ev.table[:TABLE_SLOTS])
            return MonitorEvent("store_ind", self.table_addr, len(table), table)
        return ev

    def start(self) -> None:
        m = self.machine
        m.reset()
        m.violations.clear()
        m.halted = False

    def apply(self, ev: MonitorEvent) -> Verdict:
        m = self.machine
        if ev.kind == "store_ind":
            for k in range(TABLE_SLOTS):
                m.mem[self.table_addr + 2 * k: self.table_addr + 2 * k + 2] = \
                    (ev.table[k] if k < len(ev.table) else 0).to_bytes(2, "little")
        m.regs[0] = self.driver
        m.regs[1] = self.mem.stack_top
        m.regs[4] = ev.selector
        m.regs[6] = ev.a & 0xFFFF
        m.regs[7] = ev.b & 0xFFFF
        m.halted = False
        before = len(m.violations)
        limit = m.steps + 20 + 8 * TABLE_SLOTS
        while not m.halted and m.steps < limit:
            m.step()
        if len(m.violations) > before:
            v = m.violations[-1]
            return Verdict(v.reason if v.reason in ("overflow", "underflow") else v.detail or v.reason)
        if not m.halted:
            return Verdict("no-return")
        return Verdict()

    @property
    def index(self) -> int:
        return self.machine.regs[5]

    def shadow_bytes(self) -> bytes:
        lo = self.cfg.shadow_base
        return bytes(self.machine.mem[lo: lo + 2 * self.cfg.capacity])


@dataclass
class Divergence:
    sequence: int
    event: int
    detail: str


def compare(events: Sequence[MonitorEvent], emu: EmulatedMonitor, seq_id: int = 0) -> list[Divergence]:
    """Replay ``events`` on both sides; stop at the first violation (the device resets)."""
    emu.start()
    model = ShadowStackModel(emu.cfg.capacity)
    out = []
    for k, raw in enumerate(events):
        ev = emu.normalize(raw)
        model, want = oracle_apply(model, ev)
        got = emu.apply(ev)
        if got != want:
            out.append(Divergence(seq_id, k, f"verdict {got} != oracle {want}"))
            break
        if not want.ok:
            break
        if emu.index != model.index:
            out.append(Divergence(seq_id, k, f"index {emu.index} != oracle {model.index}"))
        if emu.shadow_bytes() != model.region_bytes():
            out.append(Divergence(seq_id, k, "secure region contents differ"))
        if out:
            break
    return out


def random_sequence(rng: random.Random, capacity: int = 128, max_len: int = 24, fault_rate: float = 0.04) -> list[MonitorEvent]:
    """A balanced store/check sequence with occasional deliberate faults.

    Checks always target the most recent store; a fault corrupts one argument,
    checks an empty stack, overfills, or probes a non-member table address.
    """
    events: list[MonitorEvent] = []
    stack: list[tuple[str, int, int]] = []
    table = tuple(sorted(rng.sample(range(0xE000, 0xFFDE, 2), rng.randint(0, 8))))
    events.append(MonitorEvent("store_ind", 0, len(table), table))
    depth = 0
    n = rng.randint(1, max_len)
    for _ in range(n):
        fault = rng.random() < fault_rate
        roll = rng.random()
        if roll < 0.1:
            if table and not fault:
                events.append(MonitorEvent("check_ind", rng.choice(table)))
            else:
                events.append(MonitorEvent("check_ind", rng.randrange(0, 0x10000, 2) | 1))
            continue
        want_store = not stack or (roll < 0.55 and depth < capacity - 1)
        if fault and rng.random() < 0.3:
            # overflow or underflow probe
            if stack:
                events.append(MonitorEvent("store_ra", 0x1234))
                while depth < capacity:
                    events.append(MonitorEvent("store_ra", rng.randrange(0, 0x10000, 2)))
                    depth += 1
                events.append(MonitorEvent("store_ra", 0xE000))
            else:
                events.append(MonitorEvent(rng.choice(["check_ra", "check_rai"]), 0, 0))
            break
        if want_store:
            kind = "ra" if rng.random() < 0.7 else "rai"
            a, b = rng.randrange(0xE000, 0x10000, 2), rng.randrange(0, 0x10000)
            stack.append((kind, a, b))
            depth += 1 if kind == "ra" else 2
            events.append(MonitorEvent("store_" + kind, a, b if kind == "rai" else 0))
        else:
            kind, a, b = stack.pop()
            depth -= 1 if kind == "ra" else 2
            if fault:
                if rng.random() < 0.5:
                    a ^= 2
                else:
                    b ^= 1
            events.append(MonitorEvent("check_" + kind, a, b if kind == "rai" else 0))
    return events


def run_campaign(count: int, seed: int = 0, capacity: int | None = None, max_len: int = 24) -> tuple[int, list[Divergence]]:
    """Compare ``count`` random sequences; returns (events compared, divergences)."""
    emu = EmulatedMonitor(capacity=capacity)
    rng = random.Random(seed)
    divs: list[Divergence] = []
    total = 0
    for s in range(count):
        seq = random_sequence(rng, emu.cfg.capacity, max_len)
        total += len(seq)
        divs += compare(seq, emu, s)
    return total, divs


__all__ = ["Divergence", "EmulatedMonitor", "compare", "compare_runs", "random_sequence", "run_campaign"]


# original vs. instrumented ---------------------------------------------------

COMPARED_REGS = (1, 2, 3, 8, 9, 10, 11, 12, 13, 14, 15)


def _code_symbols(symbols: dict[str, int], mem: MemoryLayout) -> dict[int, set[str]]:
    out: dict[int, set[str]] = {}
    for name, addr in symbols.items():
        if mem.pmem[0] <= addr <= mem.pmem[1]:
            out.setdefault(addr, set()).add(name)
    return out


def compare_runs(original, instrumented, mem: MemoryLayout = DEFAULT_LAYOUT,
                 symbols: tuple[dict[str, int], dict[str, int]] | None = None) -> list[str]:
    """Differences between two RunResults that instrumentation must not cause.

    PC is left out because code moves; r4-r7 belong to the monitor. DMEM is
    compared below the deepest stack pointer either run reached, since the
    stack itself holds relocated return addresses. With ``symbols`` (original
    and instrumented symbol tables), a word that names the same code label
    in both runs counts as equal: function pointers legitimately relocate.
    """
    orig_sym = _code_symbols(symbols[0], mem) if symbols else {}
    inst_sym = _code_symbols(symbols[1], mem) if symbols else {}

    def same(a: int, b: int) -> bool:
        return a == b or bool(orig_sym.get(a, set()) & inst_sym.get(b, set()))

    problems = []
    if instrumented.violations:
        problems.append(f"instrumented run violated: {instrumented.violations[0]}")
    if original.outcome != "halt" or instrumented.outcome != "halt":
        problems.append(f"outcomes {original.outcome}/{instrumented.outcome}")
    if original.outputs != instrumented.outputs:
        problems.append(f"outputs {original.outputs} != {instrumented.outputs}")
    lo = mem.dmem[0]
    hi = min(original.min_sp, instrumented.min_sp, mem.dmem[1] + 1) & 0xFFFE
    om, im = original.memory, instrumented.memory
    for a in range(lo, hi, 2):
        wa, wb = om[a] | om[a + 1] << 8, im[a] | im[a + 1] << 8
        if not same(wa, wb):
            problems.append(f"DMEM differs at {a:#06x}: {wa:#06x} != {wb:#06x}")
            break
    for r in COMPARED_REGS:
        if not same(original.regs[r], instrumented.regs[r]):
            problems.append(f"r{r}: {original.regs[r]:#06x} != {instrumented.regs[r]:#06x}")
    return problems
