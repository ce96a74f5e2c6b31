"""Instruction encoding, decoding and image assembly.

The bit layout follows the MSP430 formats closely (format I/II/jump) but is
repo-specific: there is no constant generator, ``pop``/``inc``/``dec``/``ret``
are native format-II codes, and symbolic operands store the absolute address.
Only the instruction lengths have to agree with the real sizing rule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..errors import AsmError, AssembleError, DecodeError
from .layout import DEFAULT_LAYOUT, MemoryLayout, layout, symbols_from
from .model import (
    CODE_SECTIONS,
    JUMPS,
    PC,
    SR,
    AsmProgram,
    Directive,
    Instruction,
    Label,
    Mode,
    Operand,
    vector_id,
)
from .parser import check_instruction, parse_value

FORMAT1 = {"mov": 0x4, "add": 0x5, "sub": 0x8, "cmp": 0x9, "bit": 0xB, "bis": 0xD, "xor": 0xE, "and": 0xF}
FORMAT1_BY_CODE = {v: k for k, v in FORMAT1.items()}
FORMAT2 = {"rrc": 0, "swpb": 1, "rra": 2, "pop": 3, "push": 4, "call": 5, "reti": 6, "inc": 7, "dec": 8, "ret": 9}
FORMAT2_BY_CODE = {v: k for k, v in FORMAT2.items()}
JUMP_CODES = {"jne": 0, "jeq": 1, "jnc": 2, "jc": 3, "jn": 4, "jge": 5, "jl": 6, "jmp": 7}
JUMP_BY_CODE = {v: k for k, v in JUMP_CODES.items()}


def _src_fields(op: Operand) -> tuple[int, int, list[int]]:
    m = op.mode
    if m is Mode.REGISTER:
        return 0, op.reg, []
    if m is Mode.INDEXED:
        return 1, op.reg, [op.value & 0xFFFF]
    if m is Mode.SYMBOLIC:
        return 1, PC, [op.value & 0xFFFF]
    if m is Mode.ABSOLUTE:
        return 1, SR, [op.value & 0xFFFF]
    if m is Mode.INDIRECT:
        return 2, op.reg, []
    if m is Mode.AUTOINC:
        return 3, op.reg, []
    return 3, PC, [op.value & 0xFFFF]  # immediate


def _src_operand(As: int, r: int, ext: Callable[[], int]) -> Operand:
    if As == 0:
        return Operand(Mode.REGISTER, reg=r)
    if As == 1:
        if r == PC:
            return Operand(Mode.SYMBOLIC, value=ext())
        if r == SR:
            return Operand(Mode.ABSOLUTE, value=ext())
        return Operand(Mode.INDEXED, reg=r, value=ext())
    if r == PC:
        if As == 3:
            return Operand(Mode.IMMEDIATE, value=ext())
        raise DecodeError("indirect mode on r0")
    return Operand(Mode.INDIRECT if As == 2 else Mode.AUTOINC, reg=r)


def encode(ins: Instruction, addr: int) -> list[int]:
    """Encode a resolved instruction placed at ``addr`` into 16-bit words."""
    for op in ins.operands:
        if not op.resolved:
            raise AssembleError(f"line {ins.line}: unresolved symbol {op.label}")
    m = ins.mnemonic
    bw = 1 if ins.byte else 0
    if m in JUMPS:
        target = ins.operands[0].value
        delta = target - (addr + 2)
        if delta & 1:
            raise AssembleError(f"line {ins.line}: odd jump target {target:#06x}")
        off = delta // 2
        if not -512 <= off <= 511:
            raise AssembleError(f"line {ins.line}: jump target {target:#06x} out of range")
        return [0x2000 | JUMP_CODES[m] << 10 | (off & 0x3FF)]
    if m in FORMAT1:
        As, sreg, sext = _src_fields(ins.operands[0])
        dst = ins.operands[1]
        if dst.mode is Mode.REGISTER:
            Ad, dreg, dext = 0, dst.reg, []
        else:
            _, dreg, dext = _src_fields(dst)
            Ad = 1
        word = FORMAT1[m] << 12 | sreg << 8 | Ad << 7 | bw << 6 | As << 4 | dreg
        return [word] + sext + dext
    code = FORMAT2[m]
    if m in ("ret", "reti"):
        return [0x1000 | code << 7]
    As, r, ext = _src_fields(ins.operands[0])
    return [0x1000 | code << 7 | bw << 6 | As << 4 | r] + ext


def decode(read_word: Callable[[int], int], addr: int) -> Instruction:
    """Decode the instruction at ``addr``; operands come back resolved."""
    w = read_word(addr)
    cursor = [addr + 2]

    def ext() -> int:
        v = read_word(cursor[0] & 0xFFFF)
        cursor[0] += 2
        return v

    top = w >> 12
    if top == 0:
        raise DecodeError(f"invalid opcode {w:#06x} at {addr:#06x}")
    if top == 1:
        code = (w >> 7) & 0x1F
        if code not in FORMAT2_BY_CODE:
            raise DecodeError(f"invalid opcode {w:#06x} at {addr:#06x}")
        m = FORMAT2_BY_CODE[code]
        if m in ("ret", "reti"):
            if w & 0x7F:
                raise DecodeError(f"invalid opcode {w:#06x} at {addr:#06x}")
            return Instruction(m)
        bw = bool(w & 0x40)
        op = _src_operand((w >> 4) & 3, w & 0xF, ext)
        ins = Instruction(m, (op,), bw)
    elif top in (2, 3):
        m = JUMP_BY_CODE[(w >> 10) & 7]
        off = w & 0x3FF
        if off & 0x200:
            off -= 0x400
        target = (addr + 2 + 2 * off) & 0xFFFF
        return Instruction(m, (Operand(Mode.SYMBOLIC, value=target),))
    else:
        if top not in FORMAT1_BY_CODE:
            raise DecodeError(f"invalid opcode {w:#06x} at {addr:#06x}")
        m = FORMAT1_BY_CODE[top]
        src = _src_operand((w >> 4) & 3, (w >> 8) & 0xF, ext)
        Ad, dreg = (w >> 7) & 1, w & 0xF
        dst = _src_operand(Ad, dreg, ext)
        ins = Instruction(m, (src, dst), bool(w & 0x40))
    try:
        check_instruction(ins)
    except AsmError as exc:
        raise DecodeError(f"invalid instruction at {addr:#06x}: {exc}") from None
    return ins


@dataclass
class MemoryImage:
    """A 64 KiB byte image, its memory map and symbol table."""

    data: bytearray = field(default_factory=lambda: bytearray(0x10000))
    layout: MemoryLayout = DEFAULT_LAYOUT
    symbols: dict[str, int] = field(default_factory=dict)
    # address -> origin tag of instrumentation-inserted instructions
    origins: dict[int, str] = field(default_factory=dict)

    def word(self, addr: int) -> int:
        addr &= 0xFFFE
        return self.data[addr] | self.data[addr + 1] << 8

    def set_word(self, addr: int, value: int) -> None:
        addr &= 0xFFFE
        self.data[addr] = value & 0xFF
        self.data[addr + 1] = (value >> 8) & 0xFF

    def decode(self, addr: int) -> Instruction:
        return decode(self.word, addr)

    def copy(self) -> "MemoryImage":
        return MemoryImage(bytearray(self.data), self.layout, dict(self.symbols), dict(self.origins))

    def save(self, path: str | Path) -> None:
        """Write the raw image and a ``.sym`` sidecar listing."""
        path = Path(path)
        path.write_bytes(bytes(self.data))
        lines = [f"SYMBOL\t{name}\t0x{addr:04X}" for name, addr in sorted(self.symbols.items(), key=lambda kv: (kv[1], kv[0]))]
        lines += [f"ORIGIN\t0x{addr:04X}\t{tag}" for addr, tag in sorted(self.origins.items())]
        Path(str(path) + ".sym").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, mem: MemoryLayout = DEFAULT_LAYOUT) -> "MemoryImage":
        path = Path(path)
        data = bytearray(path.read_bytes())
        if len(data) != 0x10000:
            raise ValueError(f"{path}: expected a 65536-byte image, got {len(data)} bytes")
        img = cls(data, mem)
        side = Path(str(path) + ".sym")
        if side.exists():
            for line in side.read_text().splitlines():
                parts = line.split("\t")
                if parts[0] == "SYMBOL" and len(parts) == 3:
                    img.symbols[parts[1]] = int(parts[2], 16)
                elif parts[0] == "ORIGIN" and len(parts) == 3:
                    img.origins[int(parts[1], 16)] = parts[2]
        return img


def _word_value(text: str, symbols: dict[str, int], line: int) -> int:
    label, v = parse_value(text)
    if label is None:
        return v & 0xFFFF
    if label not in symbols:
        raise AssembleError(f"line {line}: unresolved symbol {label}")
    return (symbols[label] + v) & 0xFFFF


def entry_label(prog: AsmProgram) -> str | None:
    labels = prog.labels()
    for name in ("__reset", "main"):
        if name in labels:
            return name
    return None


def assemble(prog: AsmProgram, mem: MemoryLayout = DEFAULT_LAYOUT, require_entry: bool = True) -> MemoryImage:
    """Lay out and encode ``prog``; fill the reset and interrupt vectors.

    The reset vector points at ``__reset`` when the program has a boot stub,
    otherwise at ``main``.
    """
    addrs = layout(prog, mem)
    symbols = symbols_from(prog, addrs)
    img = MemoryImage(bytearray(0x10000), mem, symbols)
    vectors_written: dict[int, int] = {}
    for i, section, item in prog.sections():
        addr = addrs[i]
        if isinstance(item, Instruction):
            if section not in CODE_SECTIONS:
                raise AssembleError(f"line {item.line}: instruction outside a code section ({section})")
            try:
                resolved = item.resolve(symbols, addr)
            except KeyError as exc:
                raise AssembleError(f"line {item.line}: unresolved symbol {exc.args[0]}") from None
            for k, w in enumerate(encode(resolved, addr)):
                img.set_word(addr + 2 * k, w)
            if item.origin:
                img.origins[addr] = item.origin
        elif isinstance(item, Directive) and item.name == "word":
            for k, a in enumerate(item.args):
                img.set_word(addr + 2 * k, _word_value(a, symbols, item.line))
            vid = vector_id(section)
            if vid is not None:
                vectors_written[vid] = img.word(addr)
        elif isinstance(item, Directive) and item.name == "byte":
            for k, a in enumerate(item.args):
                label, v = parse_value(a)
                img.data[addr + k] = v & 0xFF

    reset_vid = (mem.reset_vector - mem.ivt[0]) // 2
    if reset_vid not in vectors_written:
        entry = entry_label(prog)
        if entry is not None:
            img.set_word(mem.reset_vector, symbols[entry])
        elif require_entry:
            raise AssembleError("no entry point: define main (or a __reset boot stub)")
    for name, vid in prog.isr_labels().items():
        if vid is None:
            raise AssembleError(f"vector missing for declared ISR {name}")
        if vid == reset_vid:
            raise AssembleError(f"ISR {name} cannot use the reset vector")
        handler = symbols[name]
        if vectors_written.get(vid, handler) != handler:
            raise AssembleError(f"vector {vid} assigned to two handlers")
        img.set_word(mem.vector_address(vid), handler)
    return img


def program_bytes(prog: AsmProgram, mem: MemoryLayout = DEFAULT_LAYOUT, sections=("text", "data")) -> int:
    """Bytes occupied by the given sections (the 'binary size' of an app)."""
    from .layout import item_size

    addrs = layout(prog, mem)
    spans: dict[str, tuple[int, int]] = {}
    for i, section, item in prog.sections():
        if section not in sections:
            continue
        size = item_size(item)
        if not size:
            continue
        lo, hi = spans.get(section, (addrs[i], addrs[i]))
        spans[section] = (min(lo, addrs[i]), max(hi, addrs[i] + size))
    return sum(hi - lo for lo, hi in spans.values())


__all__ = ["encode", "decode", "assemble", "MemoryImage", "program_bytes", "entry_label", "Label"]
