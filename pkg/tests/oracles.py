"""Independent checks used by the scenario and acceptance tests.

They look only at what the SCADA received and at the RTUs' own register
history, never at bot internals.
"""

import bisect


def reading_values(result, sub, datatype, index, since_us=0):
    """(rx time, value) of every SCADA reading of one address."""
    out = []
    for r in result.scada.readings:
        if r.substation == sub and r.kind == datatype and r.t_us >= since_us:
            k = index - r.offset
            if 0 <= k < len(r.values):
                out.append((r.t_us, r.values[k]))
    return out


def genuine_level_mismatches(result, sub):
    """Readings of the level register that differ from what the RTU held
    when it served the request."""
    hist = result.rtus[sub].history
    times = [t for t, _ in hist]
    one_way = result.fabric.latency_us(result.rtus[sub].addr.host, result.scada.addr.host)
    bad = []
    for t_rx, value in reading_values(result, sub, "hrs", 100):
        i = bisect.bisect_right(times, t_rx - one_way) - 1
        if i < 0 or hist[i][1] != value:
            bad.append((t_rx, value, hist[i][1] if i >= 0 else None))
    return bad


def replay_violations(result, source, target, T_M, start_us):
    """Each post-attack reading of ``target`` must equal a reading of
    ``source`` that was current at some instant of [t - T_M - delta, t],
    where delta is the pub-sub path latency between the two bots."""
    (s_sub, s_dt, s_idx), (t_sub, t_dt, t_idx) = source, target
    src = reading_values(result, s_sub, s_dt, s_idx)
    src_times = [t for t, _ in src]
    gw_s, gw_t = f"sub{s_sub}/gw{s_sub}", f"sub{t_sub}/gw{t_sub}"
    delta = result.fabric.latency_us(gw_s, "attacker/cnc") + result.fabric.latency_us("attacker/cnc", gw_t)
    window = int(round(T_M * 1e6)) + delta
    bad, checked = [], 0
    for t, value in reading_values(result, t_sub, t_dt, t_idx, since_us=start_us):
        lo = bisect.bisect_right(src_times, t - window) - 1
        hi = bisect.bisect_right(src_times, t)
        allowed = {v for _, v in src[max(lo, 0):hi]}
        checked += 1
        if value not in allowed:
            bad.append((t, value, sorted(allowed)))
    return bad, checked
