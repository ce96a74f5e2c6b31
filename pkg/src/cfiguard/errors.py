"""Exception hierarchy shared by the toolchain, emulator and harness."""


class CfiError(Exception):
    """Base class for every error raised by cfiguard."""


class AsmError(CfiError):
    """Syntax or semantic error in assembly source."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LayoutError(CfiError):
    """A section does not fit its memory region."""


class AssembleError(CfiError):
    """Unresolved symbols, missing vectors or unencodable operands."""


class DecodeError(CfiError):
    """A word sequence is not a valid instruction."""


class InstrumentError(CfiError):
    """The program cannot be instrumented (indirect jump, missing main, ...)."""


class ReservedRegisterError(InstrumentError):
    """r4-r7 usage that cannot be made safe with a local push/pop."""


class ScenarioError(CfiError):
    """Malformed attack scenario or interrupt schedule."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
