"""Data model for the MSP430-subset assembly language."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterator, Union

PC, SP, SR, CG = 0, 1, 2, 3

# r4: monitor selector, r5: shadow index, r6/r7: monitor arguments.
RESERVED_REGS = frozenset({4, 5, 6, 7})

_REG_ALIASES = {"pc": PC, "sp": SP, "sr": SR, "cg": CG}


@dataclass(frozen=True)
class Register:
    index: int

    def __post_init__(self):
        if not 0 <= self.index <= 15:
            raise ValueError(f"register index out of range: {self.index}")

    @property
    def reserved(self) -> bool:
        return self.index in RESERVED_REGS

    @classmethod
    def parse(cls, text: str) -> "Register":
        t = text.strip().lower()
        if t in _REG_ALIASES:
            return cls(_REG_ALIASES[t])
        if t.startswith("r") and t[1:].isdigit():
            return cls(int(t[1:]))
        raise ValueError(f"not a register: {text!r}")

    def __str__(self):
        return f"r{self.index}"


def parse_register(text: str) -> int | None:
    try:
        return Register.parse(text).index
    except ValueError:
        return None


class Mode(str, enum.Enum):
    REGISTER = "register"
    INDEXED = "indexed"
    ABSOLUTE = "absolute"
    INDIRECT = "indirect"
    AUTOINC = "autoinc"
    IMMEDIATE = "immediate"
    SYMBOLIC = "symbolic"


EXT_MODES = frozenset({Mode.INDEXED, Mode.ABSOLUTE, Mode.IMMEDIATE, Mode.SYMBOLIC})
MEMORY_MODES = frozenset({Mode.INDEXED, Mode.ABSOLUTE, Mode.INDIRECT, Mode.AUTOINC, Mode.SYMBOLIC})


@dataclass(frozen=True)
class Operand:
    """One addressing-mode operand.

    ``value`` holds the numeric part (offset, address or immediate). When
    ``label`` is set the operand is unresolved and ``value`` is an addend.
    """

    mode: Mode
    reg: int | None = None
    value: int = 0
    label: str | None = None

    @property
    def ext_words(self) -> int:
        return 1 if self.mode in EXT_MODES else 0

    @property
    def resolved(self) -> bool:
        return self.label is None

    def resolve(self, symbols: dict[str, int], here: int = 0) -> "Operand":
        if self.label is None:
            return self
        if self.label == "$":
            base = here
        elif self.label in symbols:
            base = symbols[self.label]
        else:
            raise KeyError(self.label)
        return replace(self, value=(base + self.value) & 0xFFFF, label=None)

    def _num(self) -> str:
        if self.label is None:
            return _fmt_int(self.value)
        if self.value:
            sign = "+" if self.value > 0 else "-"
            return f"{self.label}{sign}{abs(self.value)}"
        return self.label

    def __str__(self):
        m = self.mode
        if m is Mode.REGISTER:
            return f"r{self.reg}"
        if m is Mode.INDEXED:
            return f"{self._num()}(r{self.reg})"
        if m is Mode.ABSOLUTE:
            return f"&{self._num()}"
        if m is Mode.INDIRECT:
            return f"@r{self.reg}"
        if m is Mode.AUTOINC:
            return f"@r{self.reg}+"
        if m is Mode.IMMEDIATE:
            return f"#{self._num()}"
        return self._num()


def _fmt_int(v: int) -> str:
    if v < 0:
        return str(v)
    return f"0x{v:04X}" if v > 9 else str(v)


def reg(n: int) -> Operand:
    return Operand(Mode.REGISTER, reg=n)


def imm(value: int | str, addend: int = 0) -> Operand:
    if isinstance(value, str):
        return Operand(Mode.IMMEDIATE, value=addend, label=value)
    return Operand(Mode.IMMEDIATE, value=value & 0xFFFF)


def idx(offset: int, n: int) -> Operand:
    return Operand(Mode.INDEXED, reg=n, value=offset & 0xFFFF)


def ind(n: int) -> Operand:
    return Operand(Mode.INDIRECT, reg=n)


def absolute(addr: int | str) -> Operand:
    if isinstance(addr, str):
        return Operand(Mode.ABSOLUTE, label=addr)
    return Operand(Mode.ABSOLUTE, value=addr & 0xFFFF)


def sym(name: str, addend: int = 0) -> Operand:
    return Operand(Mode.SYMBOLIC, value=addend, label=name)


TWO_OPERAND = ("mov", "add", "sub", "cmp", "and", "bis", "xor", "bit")
ONE_OPERAND = ("push", "pop", "call", "swpb", "rra", "rrc", "inc", "dec")
JUMPS = ("jmp", "jeq", "jne", "jc", "jnc", "jn", "jge", "jl")
RETURNS = ("ret", "reti")
MNEMONICS = frozenset(TWO_OPERAND + ONE_OPERAND + JUMPS + RETURNS)

JUMP_ALIASES = {"jz": "jeq", "jnz": "jne", "jhs": "jc", "jlo": "jnc"}
BYTE_CAPABLE = frozenset({"mov", "cmp"})

# Mnemonics whose (single or second) operand is written.
WRITES_DST = frozenset({"mov", "add", "sub", "and", "bis", "xor", "pop", "swpb", "rra", "rrc", "inc", "dec"})


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    byte: bool = False
    line: int = 0
    origin: str = ""

    @property
    def size(self) -> int:
        if self.mnemonic in JUMPS:
            return 2
        return 2 + 2 * sum(op.ext_words for op in self.operands)

    @property
    def is_jump(self) -> bool:
        return self.mnemonic in JUMPS

    def resolve(self, symbols: dict[str, int], here: int) -> "Instruction":
        ops = tuple(op.resolve(symbols, here) for op in self.operands)
        return replace(self, operands=ops)

    def same_as(self, other: "Instruction") -> bool:
        """Equality ignoring source line and origin tag."""
        return (self.mnemonic, self.operands, self.byte) == (other.mnemonic, other.operands, other.byte)

    def text(self) -> str:
        m = self.mnemonic + (".b" if self.byte else "")
        if not self.operands:
            return m
        return f"{m}\t" + ", ".join(str(o) for o in self.operands)

    def __str__(self):
        return self.text()


@dataclass(frozen=True)
class Label:
    name: str
    line: int = 0
    origin: str = ""


@dataclass(frozen=True)
class Directive:
    name: str
    args: tuple[str, ...] = ()
    line: int = 0
    origin: str = ""

    def text(self) -> str:
        if not self.args:
            return f".{self.name}"
        return f".{self.name}\t" + ", ".join(self.args)


Item = Union[Label, Instruction, Directive]

CODE_SECTIONS = ("text", "monitor")
VECTOR_PREFIX = "__interrupt_vector_"


def section_of(directive: Directive) -> str | None:
    """Section name selected by a section directive, else None."""
    if directive.name in ("text", "data"):
        return directive.name
    if directive.name == "section" and directive.args:
        name = directive.args[0].strip()
        return name.lstrip(".") if name in (".text", ".data", ".monitor") else name
    return None


def vector_id(section: str) -> int | None:
    if section.startswith(VECTOR_PREFIX):
        tail = section[len(VECTOR_PREFIX):]
        if tail.isdigit():
            return int(tail)
    return None


@dataclass
class AsmProgram:
    """Ordered items plus the ISR naming convention."""

    items: list[Item] = field(default_factory=list)
    isr_prefix: str = "__isr_"

    def __len__(self):
        return len(self.items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self.items)

    def copy(self, items=None) -> "AsmProgram":
        return AsmProgram(list(self.items if items is None else items), self.isr_prefix)

    def __add__(self, other: "AsmProgram") -> "AsmProgram":
        # Each fragment keeps its own section state, so re-open .text first.
        return AsmProgram(self.items + [Directive("text", origin="link")] + other.items, self.isr_prefix)

    def sections(self) -> Iterator[tuple[int, str, Item]]:
        """Yield (index, current section, item); programs start in .text."""
        current = "text"
        for i, item in enumerate(self.items):
            if isinstance(item, Directive):
                s = section_of(item)
                if s is not None:
                    current = s
            yield i, current, item

    def instructions(self) -> Iterator[tuple[int, Instruction]]:
        for i, item in enumerate(self.items):
            if isinstance(item, Instruction):
                yield i, item

    def labels(self) -> dict[str, int]:
        return {it.name: i for i, it in enumerate(self.items) if isinstance(it, Label)}

    def globals(self) -> list[str]:
        names = []
        for item in self.items:
            if isinstance(item, Directive) and item.name in ("global", "globl"):
                names.extend(a.strip() for a in item.args)
        return names

    def vector_labels(self) -> dict[int, str]:
        """Vector id -> handler label from ``.section __interrupt_vector_N`` blocks."""
        out = {}
        for _, section, item in self.sections():
            vid = vector_id(section)
            if vid is not None and isinstance(item, Directive) and item.name == "word":
                out[vid] = item.args[0].strip()
        return out

    def isr_labels(self) -> dict[str, int | None]:
        """ISR label -> vector id (None when the name carries no vector)."""
        found: dict[str, int | None] = {}
        for name in self.labels():
            if name.startswith(self.isr_prefix):
                tail = name[len(self.isr_prefix):].split("_", 1)[0]
                found[name] = int(tail) if tail.isdigit() else None
        for vid, name in self.vector_labels().items():
            found[name] = vid
        return found

    def has_directive(self, name: str) -> bool:
        return any(isinstance(it, Directive) and it.name == name for it in self.items)

    def referenced_labels(self) -> set[str]:
        refs = set()
        for item in self.items:
            if isinstance(item, Instruction):
                refs.update(op.label for op in item.operands if op.label and op.label != "$")
            elif isinstance(item, Directive) and item.name == "word":
                refs.update(a.strip() for a in item.args if _is_symbol(a.strip()))
        return refs


def _is_symbol(text: str) -> bool:
    return bool(text) and (text[0].isalpha() or text[0] in "_.") and text not in ("",)
