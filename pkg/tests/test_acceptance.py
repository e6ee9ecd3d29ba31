"""The eight acceptance criteria, one test each. Every test prints a single
PASS/FAIL line; the lines are repeated in the terminal summary."""

import time

import numpy as np

from cpsbot import modbus
from cpsbot.metrics import to_csv
from cpsbot.modbus import (
    ExceptionResponse, MbapHeader, ReadCoilsRequest, ReadCoilsResponse, ReadHoldingRegistersRequest,
    ReadHoldingRegistersResponse, WriteSingleCoilRequest, WriteSingleCoilResponse, decode_frame, encode_frame,
    pack_coils, unpack_coils,
)
from cpsbot.process import SubstationSpec, SubstationState, recompute_flows, step
from cpsbot.pubsub import match_filter
from cpsbot.scenario import load_preset, preset_names, run_scenario

from oracles import replay_violations
from test_modbus import reference_frames
from test_pubsub import all_strings, client, regex_oracle, run_keepalive, star

START_US = 30_000_000


def scada_side(result):
    scada = str(result.scada.addr)
    return [r.to_json() for r in result.trace if r.direction in ("tx", "rx") and scada in (r.src, r.dst)]


def test_criterion_1_sim_impersonation(verdict):
    t0 = time.perf_counter()
    result = run_scenario(load_preset("sim_impersonation"))
    wall = time.perf_counter() - t0
    r = result.report
    cfg = result.config
    ok = ((cfg.T_S, cfg.T_C, cfg.T_M, cfg.n_substations, cfg.duration) == (1.5, 0.8, 0.6, 2, 60.0)
          and r.mu_d_ms == 0.0 and r.n_e == 1 and r.n_B == 2
          and r.delta_s_ms is not None and r.delta_s_ms < 50
          and r.delta_r_ms is not None and r.delta_r_ms < 50 and wall < 10.0)
    verdict(1, "simulated impersonation", ok,
            f"mu_d={r.mu_d_ms} n_e={r.n_e} n_B={r.n_B} ds={r.delta_s_ms} dr={r.delta_r_ms} wall={wall:.2f}s")
    assert ok


def test_criterion_2_sim_replay(verdict):
    result = run_scenario(load_preset("sim_replay"))
    r, cfg = result.report, result.config
    total_bad, total_checked = 0, 0
    for source, target in cfg.attack.replay_pairs:
        s, t = source.split("/"), target.split("/")
        bad, checked = replay_violations(result, (int(s[0][3:]), s[1], int(s[2])),
                                         (int(t[0][3:]), t[1], int(t[2])), cfg.T_M, START_US)
        total_bad += len(bad)
        total_checked += checked
    ok = r.mu_d_ms == 0.0 and r.n_e == 1 and total_checked > 0 and total_bad == 0
    verdict(2, "simulated replay", ok,
            f"mu_d={r.mu_d_ms} n_e={r.n_e} readings checked={total_checked} mismatches={total_bad}")
    assert ok


def test_criterion_3_bridge_stealth(verdict):
    bridged = run_scenario(load_preset("initialization_only"))
    tapless = run_scenario(load_preset("baseline"))
    a, b = scada_side(bridged), scada_side(tapless)
    ok = len(a) > 0 and a == b and bridged.scada.readings == tapless.scada.readings
    verdict(3, "bridge stealth", ok, f"{len(a)} SCADA-side records compared")
    assert ok


def random_pdu(rng):
    u16 = lambda: int(rng.integers(0, 0x10000))  # noqa: E731
    kind = int(rng.integers(0, 7))
    if kind == 0:
        return ReadCoilsRequest(u16(), u16())
    if kind == 1:
        return ReadHoldingRegistersRequest(u16(), u16())
    if kind == 2:
        return WriteSingleCoilRequest(u16(), bool(rng.integers(0, 2)))
    if kind == 3:
        return WriteSingleCoilResponse(u16(), bool(rng.integers(0, 2)))
    if kind == 4:
        return ReadCoilsResponse(rng.bytes(int(rng.integers(1, 251))))
    if kind == 5:
        return ReadHoldingRegistersResponse(tuple(int(v) for v in rng.integers(0, 0x10000, int(rng.integers(1, 126)))))
    return ExceptionResponse(int(rng.choice([0x81, 0x83, 0x85])), int(rng.integers(1, 12)))


def test_criterion_4_modbus_codec(verdict):
    rng = np.random.default_rng(2024)
    n, failures = 10_000, 0
    for _ in range(n):
        header = MbapHeader(int(rng.integers(0, 0x10000)), int(rng.integers(0, 256)))
        pdu = random_pdu(rng)
        got_header, got = decode_frame(encode_frame(header, pdu),
                                       expect="request" if modbus.is_request(pdu) else "response")
        failures += got != pdu or got_header.transaction_id != header.transaction_id
    coils = [True, True, False, False, False, True, True, False]
    coil_ok = pack_coils(coils) == bytes([0b01100011]) and unpack_coils(bytes([0b01100011]), 8) == coils
    frames = reference_frames()
    byte_diffs = sum(encode_frame(h, p) != ref for h, p, ref in frames)
    ok = failures == 0 and coil_ok and len(frames) == 20 and byte_diffs == 0
    verdict(4, "Modbus codec", ok,
            f"{n} round trips, {failures} failures; coil example {'exact' if coil_ok else 'wrong'}; "
            f"{len(frames)} reference frames, {byte_diffs} differ")
    assert ok


def test_criterion_5_pubsub_semantics(verdict):
    # wildcards against a regex oracle, alphabet 3, depth 4
    topics = list(all_strings("abc", 4))
    filters = [f for f in all_strings(["a", "b", "+", "*"], 4) if "*" not in f.split("/")[:-1]]
    wild_bad = sum(match_filter(f, t) != bool(regex_oracle(f).match(t)) for f in filters for t in topics)

    # QoS 2 exactly once, 10% loss, 1000 publishes
    fab, broker, addrs = star(2, loss=0.10, seed=11)
    pub = client(fab, broker, addrs[0], "pub", keep_alive=0)
    sub = client(fab, broker, addrs[1], "sub", keep_alive=0)
    sub.subscribe("d/*", 2)
    fab.run_until(2.0)
    for i in range(1000):
        pub.publish(f"d/{i % 5}", str(i).encode(), 2)
    fab.run_until(2000.0)
    qos2_ok = [m.payload for m in sub.received] == [str(i).encode() for i in range(1000)]
    drops = sum(r.direction == "drop" for r in fab.trace)

    # persistent session: missed QoS 1 messages arrive in order
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub")
    sub = client(fab, broker, b, "sub", clean=False)
    sub.subscribe("q", 1)
    fab.run_until(0.1)
    sub.disconnect()
    fab.run_until(0.2)
    for i in range(20):
        pub.publish("q", bytes([i]), 1)
    fab.run_until(0.6)
    sub.connect()
    fab.run_until(2.0)
    session_ok = [m.payload for m in sub.received] == [bytes([i]) for i in range(20)]

    # keep-alive expiry
    _, watcher = run_keepalive(10, 16.0)
    dead = [m for m in watcher.received if m.topic == "cpsb/bot7/dead"]

    ok = wild_bad == 0 and qos2_ok and drops > 0 and session_ok and len(dead) == 1
    verdict(5, "pub-sub semantics", ok,
            f"wildcard mismatches={wild_bad}; qos2 exactly-once={qos2_ok} ({drops} drops); "
            f"session replay={session_ok}; dead notices={len(dead)}")
    assert ok


def test_criterion_6_conservation(verdict):
    spec = SubstationSpec(tank_capacity=1e5, initial_level=5e4, max_inflow=2.0, max_outflow=1.0,
                          demand_mean=1.0, demand_amplitude=0.5, demand_noise=0.0)
    rng = np.random.default_rng(6)
    state = recompute_flows(SubstationState(5e4, pump_on=True, valve_open=True, demand=1.0), spec)
    worst = 0.0
    for k in range(10_000):
        expected = state.level + (state.inflow - state.outflow) * 0.1
        if k % 500 == 0:
            state.pump_on = not state.pump_on
            state = recompute_flows(state, spec)
            expected = state.level + (state.inflow - state.outflow) * 0.1
        state = step(state, 0.1, spec, demand=float(rng.uniform(0, 1)))
        worst = max(worst, abs(state.level - expected))
    ok = worst <= 1e-6
    verdict(6, "process conservation", ok, f"10000 steps, worst per-step error {worst:.3g}")
    assert ok


def test_criterion_7_determinism(verdict):
    diffs = []
    for name in preset_names():
        a = run_scenario(load_preset(name))
        b = run_scenario(load_preset(name))
        if a.trace.digest() != b.trace.digest() or to_csv(a.report) != to_csv(b.report):
            diffs.append(name)
    ok = not diffs
    verdict(7, "determinism", ok, f"{len(preset_names())} presets run twice; differing: {diffs or 'none'}")
    assert ok


def test_criterion_8_fault_injection(verdict):
    cfg = load_preset("sim_impersonation")
    cfg.attack.serve_delay_ms = 5.0
    r = run_scenario(cfg).report
    ok = r.mu_d_ms is not None and abs(r.mu_d_ms - 5.0) <= 0.1
    verdict(8, "fault-injection sensitivity", ok, f"+5 ms serving delay gives mu_d={r.mu_d_ms}")
    assert ok
