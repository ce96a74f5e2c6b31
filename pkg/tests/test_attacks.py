import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfiguard import corpus
from cfiguard.attacks import (
    AttackScenario,
    Expectation,
    execute_scenario,
    image_for,
    load_scenario,
    parse_scenario,
    run_corpus,
)
from cfiguard.errors import ScenarioError
from cfiguard.toolchain import build

from conftest import golden


def test_single_write_action():
    scn = parse_scenario("target light_sensor\nat pc=0xE104 write addr=0x03FE value=0xBEEF\nexpect none\n")
    (a,) = scn.actions
    assert a.trigger == "pc" and a.kind == "write"
    assert a.at.static_value({}) == 0xE104
    assert a.addr.static_value({}) == 0x03FE
    assert a.value.static_value({}) == 0xBEEF


def test_empty_baseline_is_valid():
    scn = parse_scenario("target lcd_sensor\nexpect none\n")
    assert scn.actions == [] and scn.expect == Expectation("none")


@pytest.mark.parametrize(
    "text",
    [
        "target a\nat tick=3 write addr=1 value=2\nexpect none",
        "target a\nat step=3 poke addr=1 value=2\nexpect none",
        "target a\nat step=3 write addr=0x10000 value=2\nexpect none",
        "target a\nat step=x irq 8\nexpect none",
        "target a\nat step=1 irq 8\n",
        "target a\nexpect reset=teleport",
        "target a\nexpect none\nexpect none",
        "frobnicate\nexpect none",
    ],
)
def test_malformed_scenarios_rejected(text):
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_corpus_scenarios_parse_to_golden():
    text = "".join(load_scenario(p).text() + "\n" for p in corpus.scenario_files())
    assert text == golden("scenarios.txt", text)
    for p in corpus.scenario_files():
        scn = load_scenario(p)
        assert parse_scenario(scn.text()).text() == scn.text()


def test_corpus_coverage_counts():
    names = [p.stem for p in corpus.scenario_files()]
    assert sum(n.startswith("p1_") for n in names) >= 4
    assert sum(n.startswith("p2_") for n in names) >= 3
    assert sum(n.startswith("p3_") for n in names) >= 3
    for rule in ("r1", "r2", "r3", "r4", "r6"):
        assert any(n.startswith(f"hw_{rule}_") for n in names)
    assert len(names) >= 12


def test_unknown_symbol_is_error():
    scn = parse_scenario("target light_sensor\nat pc=no_such_label irq 8\nexpect none\n")
    image, _ = image_for(scn)
    with pytest.raises(ScenarioError, match="no_such_label"):
        execute_scenario(scn, image)


@pytest.fixture(scope="module")
def verdicts():
    return {v.name: v for v in run_corpus()}


def test_every_corpus_scenario_passes(verdicts):
    bad = [str(v) for v in verdicts.values() if not v.passed]
    assert bad == []


def test_table_member_hijack_reported(verdicts):
    v = verdicts["p3_syringe_table_member"]
    assert v.hijacked and "hijack-succeeds" in v.details


@pytest.mark.parametrize("name", ["p1_light_return", "p1_syringe_outer_frame", "p3_syringe_midfunction"])
def test_attack_is_real_without_shadow_stack(name):
    """The same corruption on the uninstrumented image goes undetected."""
    path = next(p for p in corpus.scenario_files() if p.stem == name)
    scn = load_scenario(path)
    image = build(corpus.app_source(scn.target), instrumented=False).image
    verdict = execute_scenario(scn, image)
    assert not verdict.passed
    assert not any(v.reason == "monitor-mismatch" for v in verdict.result.violations)


def test_reset_expectation_fails_when_nothing_happens():
    scn = parse_scenario("target light_sensor\nexpect reset=pmem-write\n")
    image, _ = image_for(scn)
    assert not execute_scenario(scn, image).passed


SYRINGE = build(corpus.app_source("syringe_pump")).image
TABLE = set(SYRINGE.word(SYRINGE.symbols["__cfi_func_table"] + 2 * k) for k in range(8))
PMEM_CODE = range(SYRINGE.symbols["main"], SYRINGE.symbols["__cfi_func_table"], 2)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([a for a in PMEM_CODE if a not in TABLE]))
def test_non_member_targets_rejected(addr):
    scn = parse_scenario(f"target syringe_pump\nat step=0 write addr=handlers+2 value={addr}\n"
                         "expect reset=monitor-mismatch:indirect-call-target\n")
    assert execute_scenario(scn, SYRINGE).passed


@settings(max_examples=8, deadline=None)
@given(st.sampled_from(sorted(TABLE - {SYRINGE.symbols["main"]})))
def test_member_targets_accepted(addr):
    scn = parse_scenario(f"target syringe_pump\nat step=0 write addr=handlers+2 value={addr}\nexpect hijack={addr}\n")
    v = execute_scenario(scn, SYRINGE)
    # a redirected call into a function that misbehaves later may still
    # trip the monitor downstream, but the indirect-call check itself passes
    assert all(x.detail != "indirect-call-target" for x in v.result.violations)
