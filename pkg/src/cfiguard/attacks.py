"""Scenario language and runner for adversarial executions.

Format, one directive per line, ``#`` starts a comment::

    scenario <name>
    target <app> [instrumented|original]
    schedule <schedule-id>
    at step=<n>|pc=<expr> write addr=<expr> value=<expr>
    at step=<n>|pc=<expr> irq <vector-id>
    expect reset=<reason>[:<detail>] | none | hijack=<expr>

An ``<expr>`` is a number, a symbol, or ``sp``, optionally followed by
``+N``/``-N``. ``sp`` is read when the action fires.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ScenarioError
from .isa import MemoryImage, Mode
from .machine import REASONS, Hook, Machine, RunResult
from .monitor import CODE_REASONS

_NUM = r"(?:0x[0-9a-fA-F]+|\d+)"
_EXPR = re.compile(rf"^(sp|{_NUM}|[A-Za-z_.$][\w.$]*)(?:([+-])({_NUM}))?$")
_TRIGGER = re.compile(r"^(step|pc)=(\S+)$")
VARIANTS = ("instrumented", "original")
DETAILS = tuple(CODE_REASONS.values())


@dataclass(frozen=True)
class Expr:
    base: str
    offset: int = 0

    @classmethod
    def parse(cls, text: str, line: int) -> "Expr":
        m = _EXPR.match(text)
        if not m:
            raise ScenarioError(f"malformed expression {text!r}", line)
        base, sign, off = m.groups()
        offset = int(off, 0) * (-1 if sign == "-" else 1) if off else 0
        if re.fullmatch(_NUM, base):
            value = int(base, 0) + offset
            if not 0 <= value <= 0xFFFF:
                raise ScenarioError(f"address {text} outside the 16-bit space", line)
            return cls(str(value))
        return cls(base, offset)

    @property
    def dynamic(self) -> bool:
        return self.base == "sp"

    def static_value(self, symbols: dict[str, int]) -> int:
        if self.base.isdigit():
            return int(self.base)
        if self.base not in symbols:
            raise ScenarioError(f"symbol {self.base!r} not present in the image")
        return (symbols[self.base] + self.offset) & 0xFFFF

    def evaluate(self, symbols: dict[str, int], sp: int) -> int:
        if self.dynamic:
            return (sp + self.offset) & 0xFFFF
        return self.static_value(symbols)

    def __str__(self):
        if not self.offset:
            return self.base if not self.base.isdigit() else f"0x{int(self.base):04X}"
        return f"{self.base}{self.offset:+d}"


@dataclass(frozen=True)
class Action:
    trigger: str  # "step" or "pc"
    at: Expr
    kind: str  # "write" or "irq"
    addr: Expr | None = None
    value: Expr | None = None
    vector: int | None = None


@dataclass(frozen=True)
class Expectation:
    kind: str  # "reset", "none" or "hijack"
    reason: str | None = None
    detail: str | None = None
    target: Expr | None = None

    def __str__(self):
        if self.kind == "reset":
            return f"reset={self.reason}" + (f":{self.detail}" if self.detail else "")
        if self.kind == "hijack":
            return f"hijack={self.target}"
        return "none"


@dataclass
class AttackScenario:
    name: str
    target: str
    variant: str = "instrumented"
    schedule: str | None = None
    actions: list[Action] = field(default_factory=list)
    expect: Expectation | None = None

    def text(self) -> str:
        lines = [f"scenario {self.name}", f"target {self.target} {self.variant}"]
        if self.schedule:
            lines.append(f"schedule {self.schedule}")
        for a in self.actions:
            trig = f"at {a.trigger}={a.at}"
            if a.kind == "irq":
                lines.append(f"{trig} irq {a.vector}")
            else:
                lines.append(f"{trig} write addr={a.addr} value={a.value}")
        lines.append(f"expect {self.expect}")
        return "\n".join(lines) + "\n"


def _kv(token: str, key: str, line: int) -> str:
    if not token.startswith(key + "="):
        raise ScenarioError(f"expected {key}=..., got {token!r}", line)
    return token[len(key) + 1:]


def parse_scenario(text: str, name: str = "") -> AttackScenario:
    scn = AttackScenario(name=name, target="")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        verb = words[0]
        if verb == "scenario" and len(words) == 2:
            scn.name = words[1]
        elif verb == "target" and len(words) in (2, 3):
            scn.target = words[1]
            if len(words) == 3:
                if words[2] not in VARIANTS:
                    raise ScenarioError(f"unknown image variant {words[2]!r}", lineno)
                scn.variant = words[2]
        elif verb == "schedule" and len(words) == 2:
            scn.schedule = words[1]
        elif verb == "at":
            scn.actions.append(_parse_action(words, lineno))
        elif verb == "expect" and len(words) == 2:
            if scn.expect is not None:
                raise ScenarioError("duplicate expect", lineno)
            scn.expect = _parse_expect(words[1], lineno)
        else:
            raise ScenarioError(f"unknown or malformed directive {line!r}", lineno)
    if scn.expect is None:
        raise ScenarioError("scenario declares no expected outcome")
    if not scn.target:
        raise ScenarioError("scenario declares no target")
    return scn


def _parse_action(words: list[str], line: int) -> Action:
    if len(words) < 3:
        raise ScenarioError("incomplete action", line)
    m = _TRIGGER.match(words[1])
    if not m:
        raise ScenarioError(f"malformed trigger {words[1]!r}", line)
    trig, at_text = m.groups()
    if trig == "step":
        if not re.fullmatch(_NUM, at_text):
            raise ScenarioError(f"step trigger needs a number, got {at_text!r}", line)
        at = Expr(str(int(at_text, 0)))
    else:
        at = Expr.parse(at_text, line)
        if at.dynamic:
            raise ScenarioError("pc trigger cannot use sp", line)
    if words[2] == "irq" and len(words) == 4:
        try:
            vid = int(words[3], 0)
        except ValueError:
            raise ScenarioError(f"bad vector id {words[3]!r}", line) from None
        return Action(trig, at, "irq", vector=vid)
    if words[2] == "write" and len(words) == 5:
        addr = Expr.parse(_kv(words[3], "addr", line), line)
        value = Expr.parse(_kv(words[4], "value", line), line)
        return Action(trig, at, "write", addr, value)
    raise ScenarioError(f"unknown action {' '.join(words[2:])!r}", line)


def _parse_expect(token: str, line: int) -> Expectation:
    if token == "none":
        return Expectation("none")
    if token.startswith("reset="):
        reason, _, detail = token[6:].partition(":")
        if reason not in REASONS:
            raise ScenarioError(f"unknown reset reason {reason!r}", line)
        if detail and detail not in DETAILS:
            raise ScenarioError(f"unknown monitor detail {detail!r}", line)
        return Expectation("reset", reason, detail or None)
    if token.startswith("hijack="):
        return Expectation("hijack", target=Expr.parse(token[7:], line))
    raise ScenarioError(f"unknown expectation {token!r}", line)


def load_scenario(path: str | Path) -> AttackScenario:
    p = Path(path)
    return parse_scenario(p.read_text(), name=p.stem)


# execution ------------------------------------------------------------------


@dataclass
class ScenarioVerdict:
    name: str
    passed: bool
    details: str
    result: RunResult | None = None
    hijacked: bool = False

    def __str__(self):
        status = "pass" if self.passed else "fail"
        return f"{self.name}: {status} ({self.details})"


def _hooks(scn: AttackScenario, symbols: dict[str, int]) -> list[Hook]:
    hooks = []
    for a in scn.actions:
        at = a.at.static_value(symbols)
        kw = {"step": at} if a.trigger == "step" else {"pc": at}
        if a.kind == "irq":
            hooks.append(Hook(irq=a.vector, **kw))
            continue
        # resolve static parts now so missing symbols fail before running
        for e in (a.addr, a.value):
            if not e.dynamic:
                e.static_value(symbols)
        write = tuple(
            (lambda m, e=e: e.evaluate(symbols, m.regs[1])) if e.dynamic else e.static_value(symbols)
            for e in (a.addr, a.value)
        )
        hooks.append(Hook(write=write, **kw))
    return hooks


def execute_scenario(scn: AttackScenario, image: MemoryImage, schedule=(), max_steps: int = 50_000) -> ScenarioVerdict:
    """Run ``scn`` against ``image`` and judge the outcome.

    For reset expectations the corrupted transfer must never retire: after
    the first corrupting write, no normal-state instruction may execute at
    any written value.
    """
    symbols = image.symbols
    hooks = _hooks(scn, symbols)
    exp = scn.expect
    m = Machine(image, schedule, hooks, trace=True)
    res = m.run(max_steps)
    writes = res.hook_writes
    first_write = writes[0].step if writes else None
    fetched = {(pc, sec) for _, pc, _, sec in _after(res.trace, first_write)}
    targets = {w.value for w in writes}
    arrived = _indirect_arrivals(res.trace, image, first_write)
    retired = sorted(t for t in targets if t in arrived)

    if exp.kind == "reset":
        if not res.violations:
            return ScenarioVerdict(scn.name, False, f"expected {exp}, run ended with {res.outcome}", res)
        v = res.violations[0]
        if v.reason != exp.reason or (exp.detail and v.detail != exp.detail):
            return ScenarioVerdict(scn.name, False, f"expected {exp}, got {v.reason}:{v.detail}", res)
        if scn.actions and not writes and not any(h.fired for h in hooks):
            return ScenarioVerdict(scn.name, False, "no action fired before the reset", res)
        if first_write is not None and v.step < first_write:
            return ScenarioVerdict(scn.name, False, "reset happened before the corruption", res)
        if retired:
            return ScenarioVerdict(scn.name, False, f"corrupted target {retired[0]:#06x} executed before reset", res)
        return ScenarioVerdict(scn.name, True, f"reset({v.reason}{':' + v.detail if v.detail else ''}) at step {v.step}", res)

    if res.violations:
        return ScenarioVerdict(scn.name, False, f"unexpected violation: {res.violations[0]}", res)
    if exp.kind == "none":
        ok = res.outcome == "halt"
        return ScenarioVerdict(scn.name, ok, "no violation" if ok else f"run ended with {res.outcome}", res)
    target = exp.target.static_value(symbols)
    reached = (target, False) in fetched and bool(writes)
    detail = f"hijack-succeeds to {target:#06x}" if reached else f"target {target:#06x} never reached"
    return ScenarioVerdict(scn.name, reached, detail, res, hijacked=reached)


_RETURNS = ("ret", "reti")


def _indirect_arrivals(trace, image: MemoryImage, step) -> set[int]:
    """Normal-state PCs entered through a data-dependent transfer at or after ``step``.

    Straight-line flow, relative jumps and ``call #imm`` are ignored: a
    written value that happens to name code the program reaches legally
    must not count as a hijack.
    """
    if step is None or not trace:
        return set()
    out = set()
    for prev, cur in zip(trace, trace[1:]):
        if cur[0] < step or cur[3] or prev[3]:
            continue
        mn = prev[2]
        if mn in _RETURNS:
            out.add(cur[1])
        elif mn == "call":
            op = image.decode(prev[1]).operands[0]
            if op.mode is not Mode.IMMEDIATE:
                out.add(cur[1])
    return out


def _after(trace, step):
    if step is None or not trace:
        return []
    return [t for t in trace if t[0] >= step]


def image_for(scn: AttackScenario, build_cache: dict | None = None):
    """Build the scenario's target from the bundled corpus; returns (image, schedule)."""
    from . import corpus
    from .toolchain import build

    if scn.target not in corpus.app_names():
        raise ScenarioError(f"unknown target app {scn.target!r}")
    key = (scn.target, scn.variant)
    cache = build_cache if build_cache is not None else {}
    if key not in cache:
        cache[key] = build(corpus.app_source(scn.target), instrumented=scn.variant == "instrumented").image
    schedule = ()
    if scn.schedule:
        scheds = corpus.schedules(scn.target)
        if scn.schedule not in scheds:
            raise ScenarioError(f"unknown schedule {scn.schedule!r}")
        schedule = scheds[scn.schedule]
    return cache[key], schedule


def run_corpus(paths=None) -> list[ScenarioVerdict]:
    from . import corpus

    cache: dict = {}
    out = []
    for p in paths or corpus.scenario_files():
        scn = load_scenario(p)
        image, schedule = image_for(scn, cache)
        out.append(execute_scenario(scn, image, schedule))
    return out


__all__ = [
    "Action",
    "AttackScenario",
    "Expectation",
    "Expr",
    "ScenarioVerdict",
    "execute_scenario",
    "image_for",
    "load_scenario",
    "parse_scenario",
    "run_corpus",
]
