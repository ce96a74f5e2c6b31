from .assembler import MemoryImage, assemble, decode, encode, entry_label, program_bytes
from .layout import DEFAULT_LAYOUT, MemoryLayout, format_listing, item_size, layout, symbols_from
from .model import (
    JUMPS,
    MNEMONICS,
    ONE_OPERAND,
    RESERVED_REGS,
    TWO_OPERAND,
    AsmProgram,
    Directive,
    Instruction,
    Label,
    Mode,
    Operand,
    Register,
)
from .parser import format_asm, parse_asm

__all__ = [
    "AsmProgram",
    "DEFAULT_LAYOUT",
    "Directive",
    "Instruction",
    "JUMPS",
    "Label",
    "MNEMONICS",
    "MemoryImage",
    "MemoryLayout",
    "Mode",
    "ONE_OPERAND",
    "Operand",
    "RESERVED_REGS",
    "Register",
    "TWO_OPERAND",
    "assemble",
    "decode",
    "encode",
    "entry_label",
    "format_asm",
    "format_listing",
    "item_size",
    "layout",
    "parse_asm",
    "program_bytes",
    "symbols_from",
]
