import csv
import io

import pytest

from cfiguard import corpus
from cfiguard.bench import REFERENCE, pct, run_bench
from cfiguard.instrument import TEMPLATE_SIZES

# executed instructions per event, template plus monitor path, measured once
# by single-stepping each handler and frozen here
FROZEN_COSTS = {"store_ra": 15, "check_ra": 18, "store_rai": 24, "check_rai": 28, "store_ind": 20}
CHECK_IND_BASE, CHECK_IND_STRIDE = 24, 6


@pytest.fixture(scope="module")
def report():
    return run_bench()


def test_one_row_per_app(report):
    assert [r.app for r in report.rows] == sorted(corpus.app_names())


def test_accounting_identity(report):
    for r in report.rows:
        assert r.identity_holds, r.app


def test_event_costs_are_constant(report):
    assert report.event_constants() == {k: {v} for k, v in FROZEN_COSTS.items()}


def test_template_part_of_costs():
    # the template share of each cost is its static length
    assert FROZEN_COSTS["store_ra"] - TEMPLATE_SIZES["call"] == 12
    assert FROZEN_COSTS["check_ra"] - TEMPLATE_SIZES["return"] == 15


def test_check_ind_linear_in_position(report):
    assert (report.check_ind_base, report.check_ind_stride) == (CHECK_IND_BASE, CHECK_IND_STRIDE)
    for r in report.rows:
        for c in r.check_ind_costs:
            assert (c - CHECK_IND_BASE) % CHECK_IND_STRIDE == 0


def test_size_overhead_positive(report):
    for r in report.rows:
        assert r.instrumented_bytes > r.original_bytes
        assert r.instrumented_insns > r.original_insns


def test_csv_percentages_recomputable(report):
    rows = list(csv.DictReader(io.StringIO(report.csv())))
    assert len(rows) == len(report.rows)
    for row in rows:
        assert float(row["size_pct"]) == pct(int(row["orig_bytes"]), int(row["inst_bytes"]))
        assert float(row["insn_pct"]) == pct(int(row["orig_insns"]), int(row["inst_insns"]))
        assert row["ref_size_pct"] == str(REFERENCE[row["app"]][0])


def test_report_reproducible(report):
    again = run_bench()
    assert again.csv() == report.csv()
    assert again.text() == report.text()


def test_report_carries_reference_lines(report):
    text = report.text()
    assert "reference.avg_binary_pct=10.78" in text
    assert "reference.avg_time_pct=7.35" in text
    assert "identity=BROKEN" not in text


@pytest.mark.parametrize("a,b,want", [(100, 110, 10.0), (3, 4, 33.33), (0, 5, 0.0), (200, 100, -50.0)])
def test_pct(a, b, want):
    assert pct(a, b) == want
