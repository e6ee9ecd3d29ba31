import json

import pytest
from hypothesis import given, strategies as st

from cpsbot.metrics import (
    CSV_COLUMNS, MetricsError, MetricsReport, compute_report, count_anomalies, emit_report,
    measure_deltas, measure_mu_d, scada_cycles, to_csv, to_table,
)
from cpsbot.netfabric import Trace
from cpsbot.scenario import load_preset, run_scenario

SCADA, RTU1 = "scada/scada:40000", "sub1/rtu1:502"


def hand_trace(baseline_ms=26.0, attack_ms=31.0, n=10, spoofed_at=None):
    """A trace as a third-party tool might write it: one config record and
    request/response pairs, nothing else."""
    tr = Trace()
    tr.add(0, "engine", "", "", "log", "config", meta={
        "T_S": 1.0, "T_C": 0.5, "T_M": 0.5, "n_B": 1, "attack": "distributed_impersonation",
        "t_attack_start": float(n), "scada": SCADA, "rtus": {"1": RTU1}, "targets": [1]})
    for k in range(2 * n):
        t0 = k * 1_000_000
        lat = baseline_ms if k < n else attack_ms
        meta = {"txn": k + 1, "role": "request", "sub": 1}
        tr.add(t0, SCADA, RTU1, "c1", "tx", "modbus", b"q", meta=meta)
        kind = "spoofed" if spoofed_at is not None and k >= spoofed_at else "modbus"
        rmeta = dict(meta, role="response")
        tr.add(t0 + int(lat * 1000) - 13_000, RTU1, SCADA, "c1", "tx", kind, b"r", meta=rmeta)
        tr.add(t0 + int(lat * 1000), RTU1, SCADA, "c1", "rx", kind, b"r", meta=rmeta)
    return tr


@pytest.fixture(scope="module")
def impersonation():
    return run_scenario(load_preset("sim_impersonation"))


#
#   mu_d
#

def test_mu_d_baseline_against_itself():
    lat = [26.0, 27.5, 26.25] * 5
    assert measure_mu_d(lat, lat) == 0.0


@given(st.lists(st.floats(0, 1e4), min_size=10, max_size=40),
       st.lists(st.floats(0, 1e4), min_size=10, max_size=40))
def test_mu_d_antisymmetric(a, b):
    assert measure_mu_d(a, b) == pytest.approx(-measure_mu_d(b, a), abs=1e-6)


def test_mu_d_needs_ten_cycles():
    with pytest.raises(MetricsError, match="at least 10"):
        measure_mu_d([1.0] * 9, [1.0] * 20)


def test_hand_built_trace():
    report = compute_report(hand_trace(spoofed_at=10))
    assert report.mu_d_ms == pytest.approx(5.0)
    assert report.baseline_cycles == report.attack_cycles == 10
    # last genuine frame at 9.013 s, first forged one at 10.018 s for a request sent at 10 s
    assert report.delta_r_ms == pytest.approx(18.0)
    assert report.delta_s_ms == pytest.approx(1005.0)
    assert report.n_e == 0 and report.n_B == 1


def test_negative_mu_d_floored_but_kept():
    report = compute_report(hand_trace(baseline_ms=30.0, attack_ms=28.0))
    assert report.mu_d_ms == 0.0
    assert report.mu_d_raw_ms == pytest.approx(-2.0)


def test_short_trace_leaves_mu_d_na():
    report = compute_report(hand_trace(n=4))
    assert report.mu_d_ms is None and report.attack_cycles == 4


def test_trace_without_config_rejected():
    with pytest.raises(MetricsError, match="config"):
        compute_report(Trace())


def test_resent_request_timed_from_latest_send():
    tr = hand_trace(n=1)
    first = tr.records[1]
    tr.add(int(first.virtual_time_ms * 1000) + 7_000, SCADA, RTU1, "c2", "tx", "modbus", b"q",
           meta=dict(first.meta))
    tr.records.insert(2, tr.records.pop())
    cycles = scada_cycles(tr, SCADA)
    assert cycles[0].first_tx_ms == 0.0 and cycles[0].tx_ms == 7.0
    assert cycles[0].latency_ms == pytest.approx(19.0)


#
#   Deltas and anomalies
#

def test_deltas_not_applicable_without_attack():
    report = run_scenario(load_preset("initialization_only")).report
    assert report.delta_s_ms is None and report.delta_r_ms is None and report.mu_d_ms is None
    assert count_anomalies(run_scenario(load_preset("baseline")).trace) == 0
    assert measure_deltas(hand_trace(), SCADA, {1: RTU1}) == (None, None)


def test_delayed_spoofing_grows_delta_r(impersonation):
    cfg = load_preset("sim_impersonation")
    cfg.attack.spoof_start_delay = cfg.T_S
    late = run_scenario(cfg)
    fab = late.fabric
    # oracle: the request the SCADA resends after the reset waits in the bot
    # until serving starts, then gets one relay round trip to the RTU
    notify = fab.latency_us("sub1/gw1", "scada/scada") / 1000
    relay = 2 * fab.latency_us("sub1/gw1", "sub1/rtu1") / 1000
    assert late.report.delta_r_ms == pytest.approx(cfg.T_S * 1000 + relay - notify)
    growth = late.report.delta_r_ms - impersonation.report.delta_r_ms
    assert growth == pytest.approx(cfg.T_S * 1000, rel=0.02)


def test_sim_deltas_order_of_milliseconds(impersonation):
    r = impersonation.report
    assert 0 < r.delta_s_ms < 50 and 0 < r.delta_r_ms < 50
    assert r.n_e == 1 and r.n_B == 2 and r.mu_d_ms == 0.0


#
#   Output
#

def test_csv_header_and_row(impersonation):
    text = to_csv(impersonation.report)
    header, row = text.splitlines()
    assert header == "T_S,T_C,T_M,delta_s_ms,delta_r_ms,mu_d_ms,n_B,n_e,mu_cpu,mu_ram"
    assert header.split(",") == CSV_COLUMNS
    assert row == "1.5,0.8,0.6,1.0,14.0,0.0,2,1,NA,NA"


def test_output_byte_stable(tmp_path, impersonation):
    for fmt in ("csv", "json", "table"):
        a, b = tmp_path / f"a.{fmt}", tmp_path / f"b.{fmt}"
        emit_report(impersonation.report, fmt, a)
        emit_report(impersonation.report, fmt, b)
        assert a.read_bytes() == b.read_bytes()


def test_table_uses_units(impersonation):
    lines = to_table(impersonation.report).splitlines()
    for head in ("T_S [s]", "Δs [ms]", "Δr [ms]", "μd [ms]", "n_B", "n_e"):
        assert head in lines[0]
    assert lines[1].split()[:8] == ["1.5", "0.8", "0.6", "1.0", "14.0", "0.0", "2", "1"]


def test_json_round_trip(impersonation):
    data = json.loads(emit_report(impersonation.report, "json"))
    assert MetricsReport(**data) == impersonation.report


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report(MetricsReport(1, 1, 1), "xml")


def test_saved_trace_rescored_identically(tmp_path, impersonation):
    path = tmp_path / "trace.jsonl"
    impersonation.trace.write(path)
    again = Trace.read(path)
    assert again.digest() == impersonation.trace.digest()
    assert compute_report(again) == impersonation.report
