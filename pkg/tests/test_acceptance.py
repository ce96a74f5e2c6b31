"""The eight acceptance criteria, one ``test_criterion_N`` group each.

Run directly (``python tests/test_acceptance.py``) or through pytest; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import time

import pytest

from cfiguard import corpus
from cfiguard.attacks import _hooks, load_scenario, run_corpus
from cfiguard.bench import run_bench
from cfiguard.differential import EmulatedMonitor, compare_runs, run_campaign
from cfiguard.instrument import instrument, rewrite_reserved_registers
from cfiguard.isa import parse_asm
from cfiguard.machine import Machine
from cfiguard.monitor import MonitorEvent, ShadowStackModel, oracle_apply
from cfiguard.toolchain import build

APPS = corpus.app_names()


# 1 -------------------------------------------------------------------------


def test_criterion_1_benign_equivalence():
    t0 = time.perf_counter()
    checked = 0
    for app in APPS:
        orig = build(corpus.app_source(app), instrumented=False)
        inst = build(corpus.app_source(app))
        scheds = corpus.schedules(app)
        assert len(scheds) == 3, app
        for sid, sched in scheds.items():
            ro = Machine(orig.image, sched).run()
            ri = Machine(inst.image, sched).run()
            problems = compare_runs(ro, ri, symbols=(orig.image.symbols, inst.image.symbols))
            assert problems == [], f"{sid}: {problems}"
            assert ri.violations == [] and ro.outputs
            checked += 1
    assert checked == 21
    assert time.perf_counter() - t0 < 5.0


# 2 -------------------------------------------------------------------------


def test_criterion_2_attack_corpus():
    verdicts = run_corpus()
    assert len(verdicts) >= 12
    failed = [str(v) for v in verdicts if not v.passed]
    assert failed == []
    by_name = {v.name: v for v in verdicts}
    # every backward-edge corruption is caught by the monitor
    for name, v in by_name.items():
        if name.startswith(("p1_", "p2_")):
            assert v.result.violations[0].reason == "monitor-mismatch", name
    assert by_name["p3_syringe_midfunction"].result.violations[0].detail == "indirect-call-target"
    assert by_name["p3_syringe_table_member"].hijacked


# 3 -------------------------------------------------------------------------


@pytest.mark.parametrize("depth,outcome", [(128, "halt"), (129, "violation")])
def test_criterion_3_capacity(depth, outcome):
    res = Machine(build(corpus.nested_call_program(depth)).image).run(100_000)
    assert res.outcome == outcome
    if outcome == "halt":
        assert res.violations == []
    else:
        assert res.violations[0].reason == "overflow"


# 4 -------------------------------------------------------------------------


@pytest.mark.parametrize("app", APPS)
def test_criterion_4_fixpoint(app):
    prog, _ = rewrite_reserved_registers(parse_asm(corpus.app_source(app)))
    _, report = instrument(prog)
    assert report.iterations <= 3


# 5 -------------------------------------------------------------------------


def test_criterion_5_oracle():
    m = ShadowStackModel()
    for ra in (0xE010, 0xE020):
        m, v = oracle_apply(m, MonitorEvent("store_ra", ra))
        assert v.ok
    assert m.index == 2
    m, v = oracle_apply(m, MonitorEvent("store_ra", 0xBEEF))
    assert v.ok and m.index == 3
    assert m.region_bytes()[4:6] == (0xBEEF).to_bytes(2, "little")  # 0x2000 + 2*2


def test_criterion_5_emulated():
    emu = EmulatedMonitor()
    emu.start()
    for ra in (0xE010, 0xE020):
        assert emu.apply(MonitorEvent("store_ra", ra)).ok
    assert emu.index == 2
    assert emu.apply(MonitorEvent("store_ra", 0xBEEF)).ok
    assert emu.machine.word(0x2004) == 0xBEEF
    assert emu.index == 3


# 6 -------------------------------------------------------------------------


def test_criterion_6_monitor_differential():
    t0 = time.perf_counter()
    events, divergences = run_campaign(10_000, seed=20240601)
    elapsed = time.perf_counter() - t0
    assert events > 10_000
    assert divergences == []
    assert elapsed < 30.0


# 7 -------------------------------------------------------------------------

RULES = {
    "hw_r1_fetch_from_data": "fetch-from-data",
    "hw_r2_pmem_write": "pmem-write",
    "hw_r3_secure_write": "secure-access",
    "hw_r4_illegal_entry": "illegal-entry",
    "hw_r6_trigger_abuse": "trigger-abuse",
}


@pytest.mark.parametrize("name", sorted(RULES))
def test_criterion_7_hardware_rule(name):
    """Step until the fault; nothing but the attacker's own accepted writes may change on that step."""
    scn = load_scenario(corpus.corpus_dir() / "scenarios" / f"{name}.scn")
    image = build(corpus.app_source(scn.target), instrumented=scn.variant == "instrumented").image
    m = Machine(image, hooks=_hooks(scn, image.symbols), reset_on_violation=False)
    ev = None
    while ev is None and m.steps < 50_000 and not m.halted:
        regs, mem, writes = list(m.regs), bytes(m.mem), len(m.hook_writes)
        ev = m.step()
    assert ev is not None, "no violation"
    assert ev.reason == RULES[name]
    expected = bytearray(mem)
    for w in m.hook_writes[writes:]:
        expected[w.address:w.address + 2] = w.value.to_bytes(2, "little")
    assert m.regs == regs
    assert bytes(m.mem) == bytes(expected)


# 8 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def bench():
    return run_bench()


def test_criterion_8_identity(bench):
    assert len(bench.rows) == 7
    for r in bench.rows:
        assert r.identity_holds, r.app
        assert r.original_bytes > 0 and r.original_insns > 0


def test_criterion_8_constant_costs(bench):
    consts = bench.event_constants()
    assert all(len(v) == 1 for v in consts.values())
    assert set(consts) == {"store_ra", "check_ra", "store_rai", "check_rai", "store_ind"}
    assert bench.check_ind_base is not None


def test_criterion_8_report_fields(bench):
    text = bench.text()
    for r in bench.rows:
        assert f"app.{r.app}.binary_pct=" in text and f"app.{r.app}.insn_pct=" in text
    assert "reference.avg_binary_pct=10.78" in text and "reference.avg_time_pct=7.35" in text


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
