"""Bundled benchmark apps, interrupt schedules and attack scenarios."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..machine import parse_schedule


def _dir(kind: str) -> Path:
    return Path(str(resources.files(__name__) / kind))


def corpus_dir() -> Path:
    return Path(str(resources.files(__name__)))


def app_names() -> list[str]:
    return sorted(p.stem for p in _dir("apps").glob("*.s"))


def app_source(name: str) -> str:
    return (_dir("apps") / f"{name}.s").read_text()


def schedule_files(name: str) -> list[Path]:
    return sorted(_dir("schedules").glob(f"{name}_*.irq"))


def schedules(name: str) -> dict[str, list[tuple[int, int]]]:
    """Schedule id (file stem) -> parsed (step, vector) pairs."""
    return {p.stem: parse_schedule(p.read_text()) for p in schedule_files(name)}


def scenario_files() -> list[Path]:
    return sorted(_dir("scenarios").glob("*.scn"))


def nested_call_program(depth: int) -> str:
    """``main`` calls f1, f1 calls f2, ... down to f<depth>: exactly ``depth`` live frames."""
    lines = ["\t.text", "\t.global\tmain"] + [f"\t.global\tf{i}" for i in range(1, depth + 1)]
    lines += ["__reset:", "\tmov\t#0x1000, r1", "\tjmp\tmain", "main:"]
    if depth:
        lines.append("\tcall\t#f1")
    lines += ["\tmov\t#1, &0x0180", "\tmov\t#1, &0x0182"]
    for i in range(1, depth + 1):
        lines.append(f"f{i}:")
        if i < depth:
            lines.append(f"\tcall\t#f{i + 1}")
        lines.append("\tret")
    return "\n".join(lines) + "\n"


__all__ = [
    "nested_call_program","app_names", "app_source", "corpus_dir", "scenario_files", "schedule_files", "schedules"]
