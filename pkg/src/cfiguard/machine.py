"""Instruction-level emulator with the hardware rule set.

Rules checked before any access takes effect:

R1  instruction fetch outside PMEM/monitor ROM        -> fetch-from-data
R2  data write into PMEM, monitor ROM or the IVT      -> pmem-write
R3  secure-region access while not in secure state    -> secure-access
R4  entering monitor ROM anywhere but MON_ENTRY       -> illegal-entry
R5  interrupts are deferred while in secure state
R6  write to the violation trigger outside secure     -> trigger-abuse

Each instruction runs as a small transaction: register and memory writes are
buffered and committed only if every access passed its checks, so a
violating instruction never mutates state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

from .errors import DecodeError, ScenarioError
from .isa import MemoryImage, Mode
from .isa.model import JUMPS
from .monitor import CODE_REASONS, KIND_BY_SELECTOR

log = logging.getLogger(__name__)

C, Z, N, GIE, V = 0x1, 0x2, 0x4, 0x8, 0x100

REASONS = (
    "fetch-from-data",
    "pmem-write",
    "secure-access",
    "illegal-entry",
    "monitor-mismatch",
    "overflow",
    "underflow",
    "trigger-abuse",
)

# memory classes
_PLAIN, _IMMUTABLE, _SECURE, _MMIO = 0, 1, 2, 3


class _Violation(Exception):
    def __init__(self, reason: str, address: int, detail: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.address = address
        self.detail = detail


@dataclass(frozen=True)
class ViolationEvent:
    step: int
    reason: str
    address: int
    pc: int
    detail: str = ""

    def __str__(self):
        extra = f" ({self.detail})" if self.detail else ""
        return f"step {self.step}: {self.reason}{extra} at {self.address:#06x}, pc={self.pc:#06x}"


Value = Union[int, Callable[["Machine"], int]]


@dataclass
class Hook:
    """Adversarial action fired once when its trigger matches.

    ``write`` is an (address, value) pair; either may be a callable taking
    the machine, evaluated when the hook fires.
    """

    step: int | None = None
    pc: int | None = None
    write: tuple[Value, Value] | None = None
    irq: int | None = None
    fired: bool = False

    def due(self, m: "Machine") -> bool:
        if self.fired:
            return False
        if self.step is not None:
            return m.steps >= self.step
        return m.regs[0] == self.pc


@dataclass(frozen=True)
class HookRecord:
    step: int
    pc: int
    address: int
    value: int


@dataclass
class RunResult:
    outcome: str  # "halt", "violation" or "step-limit"
    violations: list[ViolationEvent]
    steps: int
    normal_steps: int
    secure_steps: int
    outputs: list[int]
    regs: list[int]
    memory: bytes
    min_sp: int
    monitor_calls: list[tuple[int, int]] = field(default_factory=list)
    hook_writes: list[HookRecord] = field(default_factory=list)
    trace: list[tuple[int, int, str, bool]] | None = None

    @property
    def clean(self) -> bool:
        return self.outcome == "halt" and not self.violations

    def format_trace(self) -> str:
        return "".join(f"{s}\t{pc:04X}\t{mn}\t{int(sec)}\n" for s, pc, mn, sec in self.trace or ())


def parse_schedule(text: str) -> list[tuple[int, int]]:
    """Parse ``irq <vector-id> at <step>`` lines into (step, vector) pairs."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "irq" or parts[2] != "at":
            raise ScenarioError(f"expected 'irq <vector-id> at <step>', got {line!r}", lineno)
        try:
            vid, step = int(parts[1], 0), int(parts[3], 0)
        except ValueError:
            raise ScenarioError(f"bad number in {line!r}", lineno) from None
        if vid < 0 or step < 0:
            raise ScenarioError("negative value in schedule", lineno)
        out.append((step, vid))
    return sorted(out)


def format_schedule(schedule: Iterable[tuple[int, int]]) -> str:
    return "".join(f"irq {vid} at {step}\n" for step, vid in schedule)


class Machine:
    """One MSP430-subset core plus the rule-enforcing memory system."""

    def __init__(self, image: MemoryImage, schedule: Iterable[tuple[int, int]] = (), hooks: Iterable[Hook] = (),
                 trace: bool = False, halt_on_self_jump: bool = True, reset_on_violation: bool = True):
        self.image = image.copy()
        self.reset_on_violation = reset_on_violation
        self.layout = image.layout
        self.mem = self.image.data
        self.mon_entry = image.symbols.get("MON_ENTRY", self.layout.rom[0])
        self.schedule = sorted(schedule)
        self.hooks = list(hooks)
        self.halt_on_self_jump = halt_on_self_jump
        self.trace: list | None = [] if trace else None
        self._cls = self._classify()
        self._rom_lo, self._rom_hi = self.layout.rom
        self._cache: dict[int, tuple] = {}
        self.steps = 0
        self.normal_steps = 0
        self.secure_steps = 0
        self.outputs: list[int] = []
        self.violations: list[ViolationEvent] = []
        self.monitor_calls: list[tuple[int, int]] = []
        self.hook_writes: list[HookRecord] = []
        self.regs = [0] * 16
        self.pending: list[int] = []
        self.halted = False
        self.in_secure = False
        self.min_sp = 0x10000
        self._seg: list[int] | None = None
        self.reset()

    # memory map -------------------------------------------------------------

    def _classify(self) -> bytearray:
        cls = bytearray(0x10000)
        L = self.layout
        for lo, hi in (L.pmem, L.rom, L.ivt):
            cls[lo:hi + 1] = bytes([_IMMUTABLE]) * (hi - lo + 1)
        for lo, hi in (L.secure, L.secure_meta):
            cls[lo:hi + 1] = bytes([_SECURE]) * (hi - lo + 1)
        lo, hi = L.mmio
        cls[lo:hi + 1] = bytes([_MMIO]) * (hi - lo + 1)
        return cls

    def executable(self, addr: int) -> bool:
        L = self.layout
        return L.pmem[0] <= addr <= L.pmem[1] or L.rom[0] <= addr <= L.rom[1]

    def in_rom(self, addr: int) -> bool:
        return self.layout.rom[0] <= addr <= self.layout.rom[1]

    def word(self, addr: int) -> int:
        addr &= 0xFFFE
        return self.mem[addr] | self.mem[addr + 1] << 8

    def _read(self, addr: int, byte: bool, secure: bool) -> int:
        if not byte:
            addr &= 0xFFFE
        c = self._cls[addr]
        if c == _SECURE and not secure:
            raise _Violation("secure-access", addr, "read")
        if c == _MMIO:
            return 0
        if byte:
            return self.mem[addr]
        return self.mem[addr] | self.mem[addr + 1] << 8

    def _check_write(self, addr: int, value: int, secure: bool) -> None:
        c = self._cls[addr]
        if c == _PLAIN:
            return
        if c == _IMMUTABLE:
            raise _Violation("pmem-write", addr)
        if c == _SECURE:
            if not secure:
                raise _Violation("secure-access", addr, "write")
            return
        if addr & 0xFFFE == self.layout.trigger:
            if not secure:
                raise _Violation("trigger-abuse", addr)
            reason = CODE_REASONS.get(value, "bad-selector")
            if reason in ("overflow", "underflow"):
                raise _Violation(reason, addr, f"code {value}")
            raise _Violation("monitor-mismatch", addr, reason)

    def _store(self, addr: int, value: int, byte: bool) -> None:
        if self._cls[addr] == _MMIO:
            a = addr & 0xFFFE
            if a == self.layout.output_port:
                self.outputs.append(value)
            elif a == self.layout.halt_port:
                self.halted = True
            return
        if byte:
            self.mem[addr] = value & 0xFF
        else:
            self.mem[addr] = value & 0xFF
            self.mem[addr + 1] = (value >> 8) & 0xFF

    # control ----------------------------------------------------------------

    def reset(self) -> None:
        """Zero registers and the secure region, restart from the reset vector."""
        self.regs = [0] * 16
        L = self.layout
        for lo, hi in (L.secure, L.secure_meta):
            self.mem[lo:hi + 1] = bytes(hi - lo + 1)
        self.regs[0] = self.word(L.reset_vector)
        self.pending = []
        self.in_secure = False
        self._seg = None

    def raise_irq(self, vector: int) -> None:
        self.pending.append(vector)

    def _decode(self, pc: int) -> tuple:
        d = self._cache.get(pc)
        if d is None:
            try:
                ins = self.image.decode(pc)
            except DecodeError as exc:
                raise _Violation("fetch-from-data", pc, f"undecodable: {exc}") from None
            end = pc + ins.size - 2
            if not (self.executable(end) and self.in_rom(end) == self.in_rom(pc)):
                raise _Violation("fetch-from-data", end, "instruction crosses region boundary")
            d = (ins.mnemonic, ins.operands, ins.byte, ins.size)
            self._cache[pc] = d
        return d

    def _fire_hooks(self) -> None:
        for h in self.hooks:
            if not h.due(self):
                continue
            h.fired = True
            if h.irq is not None:
                self.raise_irq(h.irq)
            if h.write is not None:
                addr, value = (v(self) if callable(v) else v for v in h.write)
                addr &= 0xFFFF
                value &= 0xFFFF
                # attacker writes come from the program, i.e. normal state
                self._check_write(addr & 0xFFFE, value, secure=False)
                self.hook_writes.append(HookRecord(self.steps, self.regs[0], addr, value))
                self._store(addr & 0xFFFE, value, False)

    def _deliver_interrupt(self) -> bool:
        while self.schedule and self.schedule[0][0] <= self.steps:
            self.pending.append(self.schedule.pop(0)[1])
        if not self.pending or not self.regs[2] & GIE or self.in_rom(self.regs[0]):
            return False
        vid = self.pending.pop(0)
        sp = self.regs[1]
        for value in (self.regs[0], self.regs[2]):
            sp = (sp - 2) & 0xFFFF
            self._check_write(sp, value, False)
        self._store((self.regs[1] - 2) & 0xFFFF, self.regs[0], False)
        self._store(sp, self.regs[2], False)
        self.regs[1] = sp
        self.min_sp = min(self.min_sp, sp)
        self.regs[2] = 0
        self.regs[0] = self.word(self.layout.vector_address(vid))
        if self.trace is not None:
            self.trace.append((self.steps, self.regs[0], f"<irq {vid}>", False))
        return True

    def step(self) -> ViolationEvent | None:
        """Deliver one interrupt or execute one instruction."""
        if self.halted:
            return None
        pc = self.regs[0]
        try:
            if self.hooks:
                self._fire_hooks()
            if (self.pending or self.schedule) and self._deliver_interrupt():
                return None
            if self.halted:
                return None
            pc = self.regs[0]
            secure = self._rom_lo <= pc <= self._rom_hi
            if not secure and not self.executable(pc):
                raise _Violation("fetch-from-data", pc)
            if secure and not self.in_secure and pc != self.mon_entry:
                raise _Violation("illegal-entry", pc)
            mn, ops, byte, size = self._decode(pc)
            if secure and not self.in_secure:
                self._seg = [self.regs[4], 0]
            elif not secure and self._seg is not None:
                self.monitor_calls.append((self._seg[0], self._seg[1]))
                self._seg = None
            self._execute(pc, mn, ops, byte, size, secure)
        except _Violation as v:
            ev = ViolationEvent(self.steps, v.reason, v.address, pc, v.detail)
            self.violations.append(ev)
            log.debug("violation: %s", ev)
            if self.reset_on_violation:
                self.reset()
            else:
                self.halted = True
            return ev
        return None

    def run(self, max_steps: int = 200_000, resume_after_reset: bool = False) -> RunResult:
        outcome = "step-limit"
        while self.steps < max_steps:
            ev = self.step()
            if ev is not None and not resume_after_reset:
                outcome = "violation"
                break
            if self.halted:
                outcome = "violation" if self.violations else "halt"
                break
        return self.result(outcome)

    def result(self, outcome: str) -> RunResult:
        return RunResult(
            outcome=outcome,
            violations=list(self.violations),
            steps=self.steps,
            normal_steps=self.normal_steps,
            secure_steps=self.secure_steps,
            outputs=list(self.outputs),
            regs=list(self.regs),
            memory=bytes(self.mem),
            min_sp=self.min_sp,
            monitor_calls=list(self.monitor_calls),
            hook_writes=list(self.hook_writes),
            trace=self.trace,
        )

    # execution --------------------------------------------------------------

    def _execute(self, pc: int, mn: str, ops: tuple, byte: bool, size: int, secure: bool) -> None:
        regs = self.regs
        nxt = (pc + size) & 0xFFFF
        wregs: dict[int, int] = {0: nxt}
        wmem: list[tuple[int, int, bool]] = []
        mask, sign = (0xFF, 0x80) if byte else (0xFFFF, 0x8000)

        def rget(n: int) -> int:
            return wregs[n] if n in wregs else regs[n]

        def ea(op) -> int:
            m = op.mode
            if m is Mode.INDEXED:
                return (rget(op.reg) + op.value) & 0xFFFF
            if m is Mode.INDIRECT or m is Mode.AUTOINC:
                return rget(op.reg)
            return op.value  # absolute / symbolic

        def read_src(op) -> int:
            m = op.mode
            if m is Mode.REGISTER:
                return rget(op.reg) & mask
            if m is Mode.IMMEDIATE:
                return op.value & mask
            a = ea(op)
            v = self._read(a, byte, secure)
            if m is Mode.AUTOINC:
                step = 1 if byte and op.reg > 1 else 2
                wregs[op.reg] = (rget(op.reg) + step) & 0xFFFF
            return v

        def write(a: int, v: int) -> None:
            a = a if byte else a & 0xFFFE
            self._check_write(a, v, secure)
            wmem.append((a, v, byte))

        def write_dst(op, addr, v: int) -> None:
            if op.mode is Mode.REGISTER:
                wregs[op.reg] = v & mask
            else:
                write(addr, v)

        sr = regs[2]
        flags = None  # (c, z, n, v) when the instruction updates flags

        if mn in JUMPS:
            c, z, n, ov = sr & C, sr & Z, sr & N, sr & V
            if mn == "jmp":
                take = True
            elif mn == "jeq":
                take = bool(z)
            elif mn == "jne":
                take = not z
            elif mn == "jc":
                take = bool(c)
            elif mn == "jnc":
                take = not c
            elif mn == "jn":
                take = bool(n)
            elif mn == "jge":
                take = bool(n) == bool(ov)
            else:  # jl
                take = bool(n) != bool(ov)
            target = ops[0].value
            if take:
                wregs[0] = target
                if target == pc and self.halt_on_self_jump and mn == "jmp":
                    self.halted = True
        elif mn == "ret":
            sp = rget(1)
            wregs[0] = self._read(sp, False, secure)
            wregs[1] = (sp + 2) & 0xFFFF
        elif mn == "reti":
            sp = rget(1)
            wregs[2] = self._read(sp, False, secure)
            wregs[0] = self._read(sp + 2, False, secure)
            wregs[1] = (sp + 4) & 0xFFFF
        elif len(ops) == 2:
            src, dst = ops
            s = read_src(src)
            daddr = None if dst.mode is Mode.REGISTER else ea(dst)
            if mn == "mov":
                write_dst(dst, daddr, s)
            else:
                d = rget(dst.reg) & mask if daddr is None else self._read(daddr, byte, secure)
                if mn in ("add", "sub", "cmp"):
                    if mn == "add":
                        r = s + d
                        ov = (s ^ r) & (d ^ r) & sign
                    else:
                        r = d + ((~s) & mask) + 1
                        ov = (d ^ s) & (d ^ r) & sign
                    carry = r > mask
                    r &= mask
                    flags = (carry, r == 0, r & sign, ov)
                    if mn != "cmp":
                        write_dst(dst, daddr, r)
                elif mn in ("and", "bit"):
                    r = s & d
                    flags = (r != 0, r == 0, r & sign, 0)
                    if mn == "and":
                        write_dst(dst, daddr, r)
                elif mn == "xor":
                    r = s ^ d
                    flags = (r != 0, r == 0, r & sign, s & d & sign)
                    write_dst(dst, daddr, r)
                elif mn == "bis":
                    write_dst(dst, daddr, s | d)
        else:
            op = ops[0]
            if mn == "push":
                v = read_src(op)
                sp = (rget(1) - 2) & 0xFFFF
                write(sp, v)
                wregs[1] = sp
            elif mn == "call":
                target = read_src(op)
                sp = (rget(1) - 2) & 0xFFFF
                write(sp, nxt)
                wregs[1] = sp
                wregs[0] = target
            elif mn == "pop":
                sp = rget(1)
                v = self._read(sp, False, secure)
                wregs[1] = (sp + 2) & 0xFFFF
                daddr = None if op.mode is Mode.REGISTER else ea(op)
                write_dst(op, daddr, v)
            else:
                daddr = None if op.mode is Mode.REGISTER else ea(op)
                d = rget(op.reg) if daddr is None else self._read(daddr, False, secure)
                if op.mode is Mode.AUTOINC:
                    wregs[op.reg] = (rget(op.reg) + 2) & 0xFFFF
                if mn == "swpb":
                    r = ((d << 8) | (d >> 8)) & 0xFFFF
                elif mn == "rra":
                    r = (d >> 1) | (d & 0x8000)
                    flags = (d & 1, r == 0, r & 0x8000, 0)
                elif mn == "rrc":
                    r = (d >> 1) | (0x8000 if sr & C else 0)
                    flags = (d & 1, r == 0, r & 0x8000, 0)
                elif mn == "inc":
                    r = d + 1
                    carry = r > 0xFFFF
                    r &= 0xFFFF
                    flags = (carry, r == 0, r & 0x8000, r == 0x8000)
                else:  # dec
                    r = (d - 1) & 0xFFFF
                    flags = (d != 0, r == 0, r & 0x8000, d == 0x8000)
                write_dst(op, daddr, r)

        # commit
        if flags is not None and 2 not in wregs:
            c, z, n, ov = flags
            wregs[2] = (sr & ~(C | Z | N | V)) | (C if c else 0) | (Z if z else 0) | (N if n else 0) | (V if ov else 0)
        for a, v, b in wmem:
            self._store(a, v, b)
        for n_, v in wregs.items():
            regs[n_] = v & 0xFFFF
        if regs[1] < self.min_sp:
            self.min_sp = regs[1]
        self.steps += 1
        if secure:
            self.secure_steps += 1
            if self._seg is not None:
                self._seg[1] += 1
        else:
            self.normal_steps += 1
        self.in_secure = secure
        if self.trace is not None:
            self.trace.append((self.steps - 1, pc, mn + (".b" if byte else ""), secure))


def run_image(image: MemoryImage, schedule=(), hooks=(), max_steps: int = 200_000, trace: bool = False,
              resume_after_reset: bool = False) -> RunResult:
    return Machine(image, schedule, hooks, trace).run(max_steps, resume_after_reset)


def reset(machine: Machine) -> Machine:
    machine.reset()
    return machine


__all__ = [
    "Hook",
    "HookRecord",
    "KIND_BY_SELECTOR",
    "Machine",
    "REASONS",
    "RunResult",
    "ViolationEvent",
    "format_schedule",
    "parse_schedule",
    "run_image",
    "reset",
]
