"""Site discovery, reserved-register spilling and template insertion.

Templates (origin tags in the emitted source):

T1  before a call         mov #RET, r6 / mov #1, r4 / call #MON_ENTRY
T2  before ret            mov @r1, r6 / mov #2, r4 / call #MON_ENTRY
T3  ISR entry             push r4,r6,r7 / mov 8(r1), r6 / mov 6(r1), r7 / mov #3, r4 / call
T4  before reti           mov 8(r1), r6 / mov 6(r1), r7 / mov #4, r4 / call / pop r7,r6,r4
T5  main entry            mov #TABLE, r6 / mov #COUNT, r7 / mov #5, r4 / call (+ table in .text)
T6  before indirect call  mov <target>, r6 / mov #6, r4 / call #MON_ENTRY

T3/T4 keep the interrupted code's r4/r6/r7 on the stack for the whole ISR,
so an interrupt landing inside another template cannot clobber its
arguments.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

from .errors import InstrumentError, ReservedRegisterError
from .isa import AsmProgram, Directive, Instruction, Label, MemoryLayout, Mode, Operand, layout, program_bytes
from .isa.layout import DEFAULT_LAYOUT
from .isa.model import JUMPS, PC, RESERVED_REGS, SP, imm, ind, idx, reg
from .monitor import CHECK_IND, CHECK_RA, CHECK_RAI, ENTRY_LABEL, STORE_IND, STORE_RA, STORE_RAI

SITE_KINDS = ("main-entry", "call", "indirect-call", "return", "isr-prologue", "isr-epilogue")
TEMPLATE_TAGS = ("T1", "T2", "T3", "T4", "T5", "T6")
SPILL_TAG = "spill"
TABLE_LABEL = "__cfi_func_table"

# inserted instructions per site kind
TEMPLATE_SIZES = {"call": 3, "return": 3, "isr-prologue": 7, "isr-epilogue": 7, "main-entry": 4, "indirect-call": 6}


@dataclass
class InstrumentationSite:
    kind: str
    index: int
    return_address: int | None = None
    label: str | None = None


@dataclass(frozen=True)
class FunctionTable:
    """Function entry addresses emitted as ``.word`` data at ``address`` in PMEM."""

    entries: tuple[int, ...] = ()
    address: int | None = None
    names: tuple[str, ...] = ()


@dataclass
class InstrumentConfig:
    max_iterations: int = 5
    entry_label: str = ENTRY_LABEL


@dataclass
class InstrumentationReport:
    sites: Counter = field(default_factory=Counter)
    inserted: Counter = field(default_factory=Counter)
    per_site: list[tuple[str, int, int]] = field(default_factory=list)
    original_bytes: int = 0
    instrumented_bytes: int = 0
    iterations: int = 0
    table_entries: int = 0
    warnings: list[str] = field(default_factory=list)
    site_list: list[InstrumentationSite] = field(default_factory=list)
    table: FunctionTable = field(default_factory=FunctionTable)

    @property
    def inserted_total(self) -> int:
        return sum(self.inserted.values())

    def to_text(self) -> str:
        lines = [
            f"iterations={self.iterations}",
            f"original_bytes={self.original_bytes}",
            f"instrumented_bytes={self.instrumented_bytes}",
            f"inserted_total={self.inserted_total}",
            f"table_entries={self.table_entries}",
        ]
        if self.table.address is not None:
            lines.append(f"table_address=0x{self.table.address:04X}")
        lines += [f"sites.{k}={self.sites.get(k, 0)}" for k in SITE_KINDS]
        lines += [f"inserted.{k}={self.inserted.get(k, 0)}" for k in SITE_KINDS]
        lines += [f"warning={w}" for w in self.warnings]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "InstrumentationReport":
        rep = cls()
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key.startswith("sites."):
                rep.sites[key[6:]] = int(value)
            elif key.startswith("inserted."):
                rep.inserted[key[9:]] = int(value)
            elif key == "warning":
                rep.warnings.append(value)
            elif key in ("iterations", "original_bytes", "instrumented_bytes", "table_entries"):
                setattr(rep, key, int(value))
            elif key == "table_address":
                rep.table = replace(rep.table, address=int(value, 0))
        rep.sites = +rep.sites
        rep.inserted = +rep.inserted
        return rep


def is_inserted(item) -> bool:
    return bool(item.origin)


def _direct_call(ins: Instruction) -> bool:
    return ins.mnemonic == "call" and ins.operands[0].mode is Mode.IMMEDIATE


def find_sites(prog: AsmProgram) -> list[InstrumentationSite]:
    """Every original call/ret/reti, ISR label and ``main`` label, in source order."""
    isrs = prog.isr_labels()
    sites = []
    for i, item in enumerate(prog.items):
        if is_inserted(item):
            continue
        if isinstance(item, Label):
            if item.name == "main":
                sites.append(InstrumentationSite("main-entry", i, label=item.name))
            elif item.name in isrs:
                sites.append(InstrumentationSite("isr-prologue", i, label=item.name))
        elif isinstance(item, Instruction):
            if item.mnemonic == "call":
                sites.append(InstrumentationSite("call" if _direct_call(item) else "indirect-call", i))
            elif item.mnemonic == "ret":
                sites.append(InstrumentationSite("return", i))
            elif item.mnemonic == "reti":
                sites.append(InstrumentationSite("isr-epilogue", i))
    return sites


# reserved registers -----------------------------------------------------------


def reg_reads_writes(ins: Instruction) -> tuple[set[int], set[int]]:
    """Registers read and written by an instruction (explicit operands only)."""
    reads: set[int] = set()
    writes: set[int] = set()
    ops = ins.operands
    m = ins.mnemonic
    for pos, op in enumerate(ops):
        is_dst = pos == len(ops) - 1 and (len(ops) == 2 or m in ("pop", "swpb", "rra", "rrc", "inc", "dec"))
        if op.mode is Mode.REGISTER:
            if is_dst:
                writes.add(op.reg)
                if m not in ("mov", "pop"):
                    reads.add(op.reg)
            else:
                reads.add(op.reg)
        elif op.mode in (Mode.INDEXED, Mode.INDIRECT):
            reads.add(op.reg)
        elif op.mode is Mode.AUTOINC:
            reads.add(op.reg)
            writes.add(op.reg)
    if m in ("cmp", "bit"):
        writes.discard(ops[1].reg if ops[1].mode is Mode.REGISTER else -1)
    return reads, writes


def _uses_sp_memory(ins: Instruction) -> bool:
    return any(op.reg == SP and op.mode in (Mode.INDEXED, Mode.INDIRECT, Mode.AUTOINC) for op in ins.operands) or ins.mnemonic in ("push", "pop")


def _terminates(ins: Instruction) -> bool:
    return ins.mnemonic in JUMPS or ins.mnemonic in ("call", "ret", "reti")


def _blocks(prog: AsmProgram) -> list[list[int]]:
    """Maximal straight-line runs of original instructions (item indices)."""
    blocks, cur = [], []
    for i, item in enumerate(prog.items):
        if isinstance(item, Instruction) and not is_inserted(item):
            cur.append(i)
            if _terminates(item):
                blocks.append(cur)
                cur = []
        elif isinstance(item, Label) or (isinstance(item, Directive) and item.name in ("text", "data", "section")):
            if cur:
                blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    return blocks


def rewrite_reserved_registers(prog: AsmProgram, forbid: bool = False) -> tuple[AsmProgram, list[str]]:
    """Wrap original uses of r4-r7 in push/pop within their straight-line region.

    Raises ReservedRegisterError when a value would have to survive a
    call/jump boundary, when the region addresses the stack, or (with
    ``forbid``) on any use at all.
    """
    inserts_before: dict[int, list[int]] = {}
    inserts_after: dict[int, list[int]] = {}
    warnings = []
    items = prog.items
    for block in _blocks(prog):
        used: dict[int, list[int]] = {}
        written: set[int] = set()
        for pos, i in enumerate(block):
            ins = items[i]
            reads, writes = reg_reads_writes(ins)
            touched = (reads | writes) & RESERVED_REGS
            if not touched:
                continue
            line = ins.line
            if forbid:
                raise ReservedRegisterError(f"line {line}: r{min(touched)} is reserved for the monitor")
            if _terminates(ins):
                raise ReservedRegisterError(
                    f"line {line}: r{min(touched)} is live across a call/jump boundary ({ins.mnemonic})"
                )
            for r in sorted(reads & RESERVED_REGS):
                if r not in written:
                    raise ReservedRegisterError(
                        f"line {line}: r{r} is read before being set in its region; "
                        f"its value must survive a call/jump boundary"
                    )
            written |= writes & RESERVED_REGS
            for r in touched:
                used.setdefault(r, []).append(pos)
        if not used:
            continue
        first = min(p[0] for p in used.values())
        last = max(p[-1] for p in used.values())
        for pos in range(first, last + 1):
            if _uses_sp_memory(items[block[pos]]):
                raise ReservedRegisterError(
                    f"line {items[block[pos]].line}: stack access inside a region using reserved registers"
                )
        regs_used = sorted(used)
        inserts_before[block[first]] = regs_used
        inserts_after[block[last]] = regs_used[::-1]
        lines = f"{items[block[first]].line}-{items[block[last]].line}"
        warnings.append(f"wrapped {','.join(f'r{r}' for r in regs_used)} with push/pop on lines {lines}")
    if not inserts_before:
        return prog.copy(), warnings
    out = []
    for i, item in enumerate(items):
        for r in inserts_before.get(i, ()):
            out.append(Instruction("push", (reg(r),), line=item.line, origin=SPILL_TAG))
        out.append(item)
        for r in inserts_after.get(i, ()):
            out.append(Instruction("pop", (reg(r),), line=item.line, origin=SPILL_TAG))
    return prog.copy(out), warnings


def unwrapped_reserved_uses(prog: AsmProgram) -> list[int]:
    """Lines of original instructions touching r4-r7 outside a spill region."""
    bad = []
    spilled = False
    for item in prog.items:
        if isinstance(item, Instruction):
            if item.origin == SPILL_TAG:
                spilled = item.mnemonic == "push"
                continue
            if is_inserted(item):
                continue
            r, w = reg_reads_writes(item)
            if (r | w) & RESERVED_REGS and not spilled:
                bad.append(item.line)
    return bad


# instrumentation ------------------------------------------------------------


def _ins(mn: str, *ops: Operand, tag: str, line: int) -> Instruction:
    return Instruction(mn, tuple(ops), line=line, origin=tag)


def _target_operand(op: Operand) -> Operand:
    # the check must not perform the call's own autoincrement
    return replace(op, mode=Mode.INDIRECT) if op.mode is Mode.AUTOINC else op


def _check_no_indirect_jumps(prog: AsmProgram) -> None:
    for _, ins in prog.instructions():
        if is_inserted(ins):
            continue
        _, writes = reg_reads_writes(ins)
        if PC in writes and not (ins.mnemonic == "mov" and ins.operands[0].mode is Mode.IMMEDIATE):
            raise InstrumentError(
                f"line {ins.line}: indirect jump ({ins.text()}) is not supported; "
                "build without jump tables"
            )


def function_labels(prog: AsmProgram) -> list[str]:
    """Global labels defined in .text, excluding ISRs and the monitor."""
    isrs = prog.isr_labels()
    declared = set(prog.globals())
    out = []
    for _, section, item in prog.sections():
        if isinstance(item, Label) and section == "text" and item.name in declared and item.name not in isrs:
            out.append(item.name)
    return out


def instrument(prog: AsmProgram, mem: MemoryLayout = DEFAULT_LAYOUT, cfg: InstrumentConfig | None = None):
    """Insert the templates and iterate layout until every patched immediate is stable.

    Returns (instrumented program, report).
    """
    cfg = cfg or InstrumentConfig()
    if prog.has_directive("instrumented"):
        raise InstrumentError("program is already instrumented")
    labels = [it.name for it in prog.items if isinstance(it, Label)]
    if labels.count("main") != 1:
        raise InstrumentError("program must define exactly one main label")
    _check_no_indirect_jumps(prog)
    bad = unwrapped_reserved_uses(prog)
    if bad:
        raise ReservedRegisterError(
            f"line {bad[0]}: r4-r7 used by original code; apply rewrite_reserved_registers first"
        )

    report = InstrumentationReport()
    layout(prog, mem)  # iteration 1: the original must fit before anything is inserted
    # spill code from the rewriter is overhead too, so 'original' excludes it
    report.original_bytes = program_bytes(prog.copy([it for it in prog.items if it.origin != SPILL_TAG]), mem)
    sites = {s.index: s for s in find_sites(prog)}
    funcs = function_labels(prog)
    entry = cfg.entry_label
    mon = imm(entry)

    out: list = [Directive("instrumented", origin="cfi")]
    call_patches: list[tuple[int, int]] = []  # (index of mov #RET, index of call)
    call_sites: list[InstrumentationSite] = []
    table_patch: int | None = None
    isr_body = False

    def t1(line: int) -> None:
        call_patches.append((len(out), -1))
        out.extend([
            _ins("mov", imm(0), reg(6), tag="T1", line=line),
            _ins("mov", imm(STORE_RA), reg(4), tag="T1", line=line),
            _ins("call", mon, tag="T1", line=line),
        ])

    for i, item in enumerate(prog.items):
        site = sites.get(i)
        if site is None:
            if isr_body and isinstance(item, Instruction) and not is_inserted(item) and _uses_sp_memory(item) \
                    and item.mnemonic not in ("push", "pop"):
                report.warnings.append(f"line {item.line}: ISR body addresses the stack; frame is 6 bytes deeper")
            if isinstance(item, Label) and not is_inserted(item):
                isr_body = False
            out.append(item)
            continue
        report.sites[site.kind] += 1
        report.site_list.append(site)
        if site.kind in ("call", "indirect-call"):
            call_sites.append(site)
        report.inserted[site.kind] += TEMPLATE_SIZES[site.kind]
        report.per_site.append((site.kind, i, TEMPLATE_SIZES[site.kind]))
        line = getattr(item, "line", 0)
        if site.kind == "main-entry":
            out.append(item)
            table_patch = len(out)
            out.extend([
                _ins("mov", imm(0), reg(6), tag="T5", line=line),
                _ins("mov", imm(len(funcs)), reg(7), tag="T5", line=line),
                _ins("mov", imm(STORE_IND), reg(4), tag="T5", line=line),
                _ins("call", mon, tag="T5", line=line),
            ])
            isr_body = False
        elif site.kind == "isr-prologue":
            out.append(item)
            out.extend([
                _ins("push", reg(4), tag="T3", line=line),
                _ins("push", reg(6), tag="T3", line=line),
                _ins("push", reg(7), tag="T3", line=line),
                _ins("mov", idx(8, SP), reg(6), tag="T3", line=line),
                _ins("mov", idx(6, SP), reg(7), tag="T3", line=line),
                _ins("mov", imm(STORE_RAI), reg(4), tag="T3", line=line),
                _ins("call", mon, tag="T3", line=line),
            ])
            isr_body = True
        elif site.kind == "isr-epilogue":
            out.extend([
                _ins("mov", idx(8, SP), reg(6), tag="T4", line=line),
                _ins("mov", idx(6, SP), reg(7), tag="T4", line=line),
                _ins("mov", imm(CHECK_RAI), reg(4), tag="T4", line=line),
                _ins("call", mon, tag="T4", line=line),
                _ins("pop", reg(7), tag="T4", line=line),
                _ins("pop", reg(6), tag="T4", line=line),
                _ins("pop", reg(4), tag="T4", line=line),
            ])
            out.append(item)
        elif site.kind == "return":
            out.extend([
                _ins("mov", ind(SP), reg(6), tag="T2", line=line),
                _ins("mov", imm(CHECK_RA), reg(4), tag="T2", line=line),
                _ins("call", mon, tag="T2", line=line),
            ])
            out.append(item)
        elif site.kind == "call":
            t1(line)
            call_patches[-1] = (call_patches[-1][0], len(out))
            out.append(item)
        elif site.kind == "indirect-call":
            out.extend([
                _ins("mov", _target_operand(item.operands[0]), reg(6), tag="T6", line=line),
                _ins("mov", imm(CHECK_IND), reg(4), tag="T6", line=line),
                _ins("call", mon, tag="T6", line=line),
            ])
            t1(line)
            call_patches[-1] = (call_patches[-1][0], len(out))
            out.append(item)

    out.append(Directive("text", origin="T5"))
    table_label = len(out)
    out.append(Label(TABLE_LABEL, origin="T5"))
    table_words = None
    if funcs:
        table_words = len(out)
        out.append(Directive("word", tuple("0" for _ in funcs), origin="T5"))
    result = prog.copy(out)
    func_idx = {it.name: k for k, it in enumerate(out) if isinstance(it, Label) and it.name in funcs}

    iterations = 1
    while True:
        iterations += 1
        if iterations > cfg.max_iterations:
            raise InstrumentError(f"layout did not converge within {cfg.max_iterations} iterations")
        addrs = layout(result, mem)
        changed = False
        for mov_i, call_i in call_patches:
            ret = addrs[call_i] + result.items[call_i].size
            changed |= _patch_imm(result, mov_i, ret)
        if table_patch is not None:
            changed |= _patch_imm(result, table_patch, addrs[table_label])
        if table_words is not None:
            words = tuple(f"0x{addrs[func_idx[f]]:04X}" for f in funcs)
            old = result.items[table_words]
            if old.args != words:
                result.items[table_words] = replace(old, args=words)
                changed = True
        if not changed:
            break

    report.iterations = iterations
    report.table_entries = len(funcs)
    for site, (_, call_i) in zip(call_sites, call_patches):
        site.return_address = addrs[call_i] + result.items[call_i].size
    report.table = FunctionTable(
        tuple(addrs[func_idx[f]] for f in funcs), addrs[table_label], tuple(funcs)
    )
    report.instrumented_bytes = program_bytes(result, mem)
    return result, report


def _patch_imm(prog: AsmProgram, i: int, value: int) -> bool:
    ins = prog.items[i]
    op = ins.operands[0]
    if op.value == value & 0xFFFF:
        return False
    prog.items[i] = replace(ins, operands=(imm(value),) + ins.operands[1:])
    return True


def return_address_patches(prog: AsmProgram) -> list[tuple[int, int]]:
    """(T1 ``mov #RET, r6`` index, following original call index) pairs."""
    out = []
    items = prog.items
    for i, item in enumerate(items):
        if isinstance(item, Instruction) and item.origin == "T1" and item.mnemonic == "mov" \
                and item.operands[1] == reg(6):
            j = i + 1
            while j < len(items) and items[j].origin == "T1":
                j += 1
            out.append((i, j))
    return out


def uninstrumented_sites(prog: AsmProgram) -> list[int]:
    """Original call/ret/reti items not directly preceded by their template."""
    want = {"ret": "T2", "reti": "T4"}
    bad = []
    items = prog.items
    for i, item in enumerate(items):
        if not isinstance(item, Instruction) or is_inserted(item):
            continue
        tag = "T1" if item.mnemonic == "call" else want.get(item.mnemonic)
        if tag is None:
            continue
        prev = items[i - 1] if i else None
        if prev is None or getattr(prev, "origin", "") != tag:
            bad.append(i)
    return bad


def static_overhead(report: InstrumentationReport) -> dict:
    delta = report.instrumented_bytes - report.original_bytes
    pct = 100.0 * delta / report.original_bytes if report.original_bytes else 0.0
    return {
        "size_delta_bytes": delta,
        "size_delta_pct": pct,
        "inserted": dict(report.inserted),
        "sites": dict(report.sites),
    }


__all__ = [
    "FunctionTable",
    "InstrumentConfig",
    "InstrumentationReport",
    "InstrumentationSite",
    "find_sites",
    "function_labels",
    "instrument",
    "return_address_patches",
    "rewrite_reserved_registers",
    "static_overhead",
    "uninstrumented_sites",
]
