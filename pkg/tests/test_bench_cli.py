from __future__ import annotations

import json
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from sharedlsm.bench import (
    CSV_COLUMNS,
    Bucket,
    MetricsReport,
    PricingTable,
    cost_savings,
    emit_csv,
    parse_csv,
    stall_windows,
    storage_cost_compare,
)
from sharedlsm.cli import main
from sharedlsm.errors import DomainError

# -- cost model -------------------------------------------------------------------------


def test_cost_examples():
    assert cost_savings(0.8, 0.1, 3) == pytest.approx(8.333, abs=1e-3)
    assert cost_savings(1.0, 0.15, 3) == pytest.approx(5.0)
    assert cost_savings(0.8, 0.5, 3) == pytest.approx(2.273, abs=1e-3)


@pytest.mark.parametrize("s,p,n", [(0, 0.1, 3), (1.2, 0.1, 3), (0.5, -0.1, 3), (0.5, 0.1, 0), (0.5, 0.1, 2.5)])
def test_cost_domain(s, p, n):
    with pytest.raises(DomainError):
        cost_savings(s, p, n)


@given(st.floats(0.01, 1), st.floats(0, 1), st.integers(1, 9), st.floats(0, 1))
def test_savings_fall_as_hot_ratio_grows(s, p, n, dp):
    q = min(1.0, p + dp)
    assert cost_savings(s, q, n) <= cost_savings(s, p, n)


def test_table_scenarios():
    assert storage_cost_compare(PricingTable(), "oltp").savings_pct == 59.0
    olap = storage_cost_compare(PricingTable(), "olap")
    assert olap.savings_pct == 89.0 and olap.shared_nothing == 30000.0 and olap.shared_storage == 3300.0
    with pytest.raises(DomainError):
        storage_cost_compare(PricingTable(), "batch")
    with pytest.raises(DomainError):
        storage_cost_compare(PricingTable(), "oltp", cache_ratio=2)


# -- metrics ----------------------------------------------------------------------------


def test_stall_windows_merge_runs():
    assert stall_windows([0, 1, 1, 0, 1], 100) == [(100, 200), (400, 100)]
    assert stall_windows([], 100) == []


bucket_st = st.builds(
    Bucket,
    st.floats(0, 1e6, allow_nan=False),
    st.integers(0, 10**6),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
    st.integers(0, 1),
)


@given(st.lists(bucket_st, max_size=8))
def test_csv_round_trip(buckets):
    assert parse_csv(emit_csv(MetricsReport(buckets))) == buckets


def test_header_only_csv():
    text = emit_csv(MetricsReport())
    assert text == ",".join(CSV_COLUMNS) + "\n" and parse_csv(text) == []
    with pytest.raises(ValueError):
        parse_csv("a,b\n")


# -- command line -----------------------------------------------------------------------


def test_cli_eq1(capsys):
    assert main(["cost", "eq1", "--s", "0.8", "--p", "0.1", "--n", "3"]) == 0
    assert capsys.readouterr().out.strip() == "8.33"


def test_cli_eq1_domain_error(capsys):
    assert main(["cost", "eq1", "--s", "0", "--p", "0.1", "--n", "3"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_table_with_prices(tmp_path, capsys):
    prices = tmp_path / "p.json"
    prices.write_text(json.dumps({"capacity_gb": 10}))
    assert main(["cost", "table", "--scenario", "olap", "--prices", str(prices)]) == 0
    assert "89.0%" in capsys.readouterr().out
    prices.write_text("{bad json")
    assert main(["cost", "table", "--scenario", "olap", "--prices", str(prices)]) == 2


CONFIG = "[sim]\nduration_ms = 600\nbucket_ms = 200\nseed = 3\n"


def test_cli_bench_run_and_diff(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text(CONFIG)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["bench", "run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["bench", "run", "--config", str(cfg), "--out", str(b)]) == 0
    other = tmp_path / "d.ini"
    other.write_text(CONFIG + "txn_interval_ms = 2\n")
    assert main(["bench", "run", "--config", str(other), "--out", str(c)]) == 0
    assert {p.name for p in a.iterdir()} == {"metrics.csv", "trace.csv", "summary.json"}
    capsys.readouterr()
    assert main(["bench", "diff", str(a), str(b)]) == 0
    assert capsys.readouterr().out.strip() == "identical"
    assert main(["bench", "diff", str(a / "metrics.csv"), str(c / "metrics.csv")]) == 1


def test_cli_bench_config_errors(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[sim]\nnonsense = 1\n")
    assert main(["bench", "run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["bench", "run", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 2


def test_module_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "sharedlsm", "cost", "eq1", "--s", "1", "--p", "0.15", "--n", "3"],
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == "5.00"
