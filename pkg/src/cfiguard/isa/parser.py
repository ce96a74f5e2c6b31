"""Assembly text -> AsmProgram, and back."""

from __future__ import annotations

import re

from ..errors import AsmError
from .model import (
    BYTE_CAPABLE,
    JUMP_ALIASES,
    JUMPS,
    MNEMONICS,
    ONE_OPERAND,
    PC,
    RETURNS,
    SR,
    TWO_OPERAND,
    AsmProgram,
    Directive,
    Instruction,
    Label,
    Mode,
    Operand,
    parse_register,
)

DIRECTIVES = frozenset({"text", "data", "word", "byte", "global", "globl", "section", "instrumented"})

_SYMBOL = r"[A-Za-z_.$][\w.$]*"
_LABEL_RE = re.compile(rf"^\s*({_SYMBOL})\s*:(.*)$")
_VALUE_RE = re.compile(rf"^\s*(?:({_SYMBOL})\s*(?:([+-])\s*(\w+))?|([+-]?\w+))\s*$")
_INDEXED_RE = re.compile(r"^(.+)\(\s*(\w+)\s*\)$")
_ORIGIN_RE = re.compile(r";\s*@(\w+)\s*$")


def parse_int(text: str) -> int:
    t = text.strip().lower()
    neg = t.startswith("-")
    if neg or t.startswith("+"):
        t = t[1:]
    if t.startswith("0x"):
        v = int(t[2:], 16)
    elif t.endswith("h") and re.fullmatch(r"[0-9a-f]+h", t):
        v = int(t[:-1], 16)
    elif t.isdigit():
        v = int(t)
    else:
        raise ValueError(text)
    return -v if neg else v


def parse_value(text: str) -> tuple[str | None, int]:
    """Return (label, number). A bare number gives (None, n); ``lbl+4`` gives ("lbl", 4)."""
    m = _VALUE_RE.match(text)
    if not m:
        raise ValueError(text)
    name, sign, addend, number = m.groups()
    if number is not None:
        return None, parse_int(number)
    if parse_register(name) is not None:
        raise ValueError(text)
    off = 0
    if addend is not None:
        off = parse_int(addend)
        if sign == "-":
            off = -off
    return name, off


def parse_operand(text: str, line: int) -> Operand:
    t = text.strip()
    if not t:
        raise AsmError("empty operand", line)
    try:
        if t.startswith("#"):
            label, v = parse_value(t[1:])
            return Operand(Mode.IMMEDIATE, value=v if label else v & 0xFFFF, label=label)
        if t.startswith("&"):
            label, v = parse_value(t[1:])
            return Operand(Mode.ABSOLUTE, value=v if label else v & 0xFFFF, label=label)
        if t.startswith("@"):
            body = t[1:]
            auto = body.endswith("+")
            r = parse_register(body[:-1] if auto else body)
            if r is None:
                raise ValueError(t)
            return Operand(Mode.AUTOINC if auto else Mode.INDIRECT, reg=r)
        r = parse_register(t)
        if r is not None:
            return Operand(Mode.REGISTER, reg=r)
        m = _INDEXED_RE.match(t)
        if m:
            r = parse_register(m.group(2))
            if r is None:
                raise ValueError(t)
            label, v = parse_value(m.group(1))
            return Operand(Mode.INDEXED, reg=r, value=v if label else v & 0xFFFF, label=label)
        label, v = parse_value(t)
        if label is None:
            # bare number: an absolute memory reference
            return Operand(Mode.ABSOLUTE, value=v & 0xFFFF)
        return Operand(Mode.SYMBOLIC, value=v, label=label)
    except ValueError:
        raise AsmError(f"bad operand {t!r}", line) from None


def split_operands(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def check_instruction(ins: Instruction) -> None:
    """Validate operand count and addressing modes; raise AsmError."""
    m, ops, line = ins.mnemonic, ins.operands, ins.line
    want = 2 if m in TWO_OPERAND else 1 if m in ONE_OPERAND or m in JUMPS else 0
    if len(ops) != want:
        raise AsmError(f"{m} takes {want} operand(s), got {len(ops)}", line)
    if ins.byte and m not in BYTE_CAPABLE:
        raise AsmError(f"byte form not supported for {m}", line)
    for op in ops:
        if op.mode is Mode.INDEXED and op.reg in (PC, SR):
            raise AsmError("indexed mode on r0/r2 is not encodable; use symbolic or &absolute", line)
        if op.mode in (Mode.INDIRECT, Mode.AUTOINC) and op.reg == PC:
            raise AsmError("indirect mode on r0 is not encodable; use #immediate", line)
    if m in JUMPS:
        if ops[0].mode is not Mode.SYMBOLIC:
            raise AsmError(f"{m} needs a label target", line)
        return
    if m in TWO_OPERAND:
        dst = ops[1]
        if dst.mode not in (Mode.REGISTER, Mode.INDEXED, Mode.ABSOLUTE, Mode.SYMBOLIC):
            raise AsmError(f"invalid destination {dst} for {m}", line)
    elif m in ("pop", "swpb", "rra", "rrc", "inc", "dec"):
        if ops[0].mode is Mode.IMMEDIATE:
            raise AsmError(f"{m} cannot target an immediate", line)


def _parse_instruction(text: str, line: int, origin: str) -> Instruction:
    parts = text.split(None, 1)
    raw = parts[0].lower()
    byte = False
    if raw.endswith(".b"):
        raw, byte = raw[:-2], True
    elif raw.endswith(".w"):
        raw = raw[:-2]
    raw = JUMP_ALIASES.get(raw, raw)
    if raw not in MNEMONICS:
        raise AsmError(f"undefined mnemonic {parts[0]!r}", line)
    ops = tuple(parse_operand(o, line) for o in split_operands(parts[1] if len(parts) > 1 else ""))
    ins = Instruction(raw, ops, byte, line, origin)
    check_instruction(ins)
    return ins


def _parse_directive(text: str, line: int, origin: str) -> Directive:
    parts = text.split(None, 1)
    name = parts[0][1:].lower()
    if name not in DIRECTIVES:
        raise AsmError(f"unknown directive .{name}", line)
    args = tuple(split_operands(parts[1])) if len(parts) > 1 else ()
    if name in ("word", "byte"):
        if not args:
            raise AsmError(f".{name} needs at least one value", line)
        for a in args:
            try:
                label, _ = parse_value(a)
            except ValueError:
                raise AsmError(f"bad .{name} value {a!r}", line) from None
            if name == "byte" and label is not None:
                raise AsmError(".byte values must be numeric", line)
    if name == "section" and not args:
        raise AsmError(".section needs a name", line)
    return Directive(name, args, line, origin)


def parse_asm(text: str, isr_prefix: str = "__isr_") -> AsmProgram:
    """Parse GAS-flavoured source into an AsmProgram.

    ``;`` starts a comment. A trailing ``; @TAG`` comment is kept as the
    origin tag of the item on that line so instrumented output round-trips.
    """
    items = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        origin = ""
        m = _ORIGIN_RE.search(raw)
        if m:
            origin = m.group(1)
        body = raw.split(";", 1)[0].strip()
        while body:
            lm = _LABEL_RE.match(body)
            if lm and not (lm.group(1).startswith(".") and lm.group(1)[1:].lower() in DIRECTIVES):
                name = lm.group(1)
                if parse_register(name) is not None:
                    raise AsmError(f"register name used as label: {name}", lineno)
                if name in seen:
                    raise AsmError(f"duplicate label {name} (first on line {seen[name]})", lineno)
                seen[name] = lineno
                items.append(Label(name, lineno, origin))
                body = lm.group(2).strip()
                continue
            if body.startswith("."):
                items.append(_parse_directive(body, lineno, origin))
            else:
                items.append(_parse_instruction(body, lineno, origin))
            break
    return AsmProgram(items, isr_prefix)


def format_item(item) -> str:
    if isinstance(item, Label):
        s = f"{item.name}:"
    elif isinstance(item, Directive):
        s = f"\t{item.text()}"
    else:
        s = f"\t{item.text()}"
    if item.origin:
        s += f"\t; @{item.origin}"
    return s


def format_asm(prog: AsmProgram) -> str:
    return "\n".join(format_item(it) for it in prog.items) + "\n"


__all__ = ["parse_asm", "format_asm", "parse_operand", "parse_int", "parse_value", "check_instruction", "RETURNS"]
