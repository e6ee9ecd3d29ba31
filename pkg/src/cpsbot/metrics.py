"""Attack metrics computed from a run trace.

* ``delta_s``: time between the last genuine frame an RTU sent and the first
  forged frame sent in its name (worst substation).
* ``delta_r``: time between the SCADA request answered by the first forged
  frame and that frame (worst substation).
* ``mu_d``: mean SCADA round-trip under attack minus the mean round-trip
  before it.
* ``n_e``: stream resets seen on the fabric.
* ``n_B``: bots taking part in the delivery.

Everything is derived from trace records, so a saved trace can be re-scored.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from statistics import fmean
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .netfabric import Trace

log = logging.getLogger(__name__)

CSV_COLUMNS = ["T_S", "T_C", "T_M", "delta_s_ms", "delta_r_ms", "mu_d_ms", "n_B", "n_e", "mu_cpu", "mu_ram"]
MIN_CYCLES = 10
NA = "NA"


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    T_S: float
    T_C: float
    T_M: float
    delta_s_ms: Optional[float] = None
    delta_r_ms: Optional[float] = None
    mu_d_ms: Optional[float] = None
    n_B: int = 0
    n_e: int = 0
    mu_cpu: Optional[float] = None
    mu_ram: Optional[float] = None
    mu_d_raw_ms: Optional[float] = None
    baseline_cycles: int = 0
    attack_cycles: int = 0

    def row(self) -> List[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def _fmt(value) -> str:
    if value is None:
        return NA
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    text = f"{value:.3f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


#
#   Trace analysis
#

@dataclass(frozen=True)
class Cycle:
    substation: int
    txn: int
    tx_ms: float
    first_tx_ms: float
    rx_ms: float

    @property
    def latency_ms(self) -> float:
        return self.rx_ms - self.tx_ms


def config_record(trace: Trace) -> dict:
    for rec in trace:
        if rec.direction == "log" and rec.kind == "config":
            return rec.meta or {}
    raise MetricsError("trace has no config record")


def phase_times(trace: Trace) -> Dict[str, float]:
    return {rec.meta["phase"]: rec.virtual_time_ms for rec in trace
            if rec.direction == "log" and rec.kind == "phase" and rec.meta}


def scada_cycles(trace: Trace, scada: str) -> List[Cycle]:
    """Pair every SCADA request with its response. A resent request keeps
    its transaction id; the round-trip counts from the latest send."""
    sent: Dict[Tuple[str, int], Tuple[float, float]] = {}
    cycles = []
    for rec in trace:
        meta = rec.meta or {}
        if "txn" not in meta:
            continue
        if rec.direction == "tx" and rec.src == scada and meta.get("role") == "request":
            key = (rec.dst, meta["txn"])
            first = sent[key][1] if key in sent else rec.virtual_time_ms
            sent[key] = (rec.virtual_time_ms, first)
        elif rec.direction == "rx" and rec.dst == scada and meta.get("role") == "response":
            hit = sent.pop((rec.src, meta["txn"]), None)
            if hit is not None:
                cycles.append(Cycle(meta.get("sub", 0), meta["txn"], hit[0], hit[1], rec.virtual_time_ms))
    return cycles


def measure_mu_d(baseline: Iterable[float], attack: Iterable[float], min_cycles: int = MIN_CYCLES) -> float:
    """Signed difference of mean round-trips, in ms."""
    baseline, attack = list(baseline), list(attack)
    if len(baseline) < min_cycles or len(attack) < min_cycles:
        raise MetricsError(f"need at least {min_cycles} cycles per window, got "
                           f"{len(baseline)} baseline and {len(attack)} attack")
    return fmean(attack) - fmean(baseline)


def measure_deltas(trace: Trace, scada: str, rtus: Dict[int, str]) -> Tuple[Optional[float], Optional[float]]:
    """Worst (delta_s, delta_r) over the attacked substations.

    delta_r is taken against the SCADA request that the first forged frame
    answers (matched on transaction id, latest send)."""
    last_genuine: Dict[str, float] = {}
    requests: Dict[Tuple[str, int], float] = {}
    ds: Dict[str, float] = {}
    dr: Dict[str, float] = {}
    watched = set(rtus.values())
    for rec in trace:
        if rec.direction != "tx":
            continue
        meta = rec.meta or {}
        if rec.src in watched and rec.src not in ds:
            if rec.kind != "spoofed":
                last_genuine[rec.src] = rec.virtual_time_ms
                continue
            if rec.src in last_genuine:
                ds[rec.src] = rec.virtual_time_ms - last_genuine[rec.src]
            asked = requests.get((rec.src, meta.get("txn")))
            if asked is not None:
                dr[rec.src] = rec.virtual_time_ms - asked
        elif rec.src == scada and rec.dst in watched and meta.get("role") == "request":
            requests[(rec.dst, meta.get("txn"))] = rec.virtual_time_ms
    return (max(ds.values()) if ds else None, max(dr.values()) if dr else None)


def count_anomalies(trace: Trace) -> int:
    return sum(1 for rec in trace if rec.direction == "reset")


def compute_report(trace: Trace, host: Optional[Tuple[float, float]] = None) -> MetricsReport:
    cfg = config_record(trace)
    report = MetricsReport(cfg["T_S"], cfg["T_C"], cfg["T_M"], n_B=int(cfg.get("n_B", 0)),
                           n_e=count_anomalies(trace))
    if host is not None:
        report.mu_cpu, report.mu_ram = host
    if cfg.get("attack", "none") == "none":
        return report
    scada = cfg["scada"]
    rtus = {int(k): v for k, v in cfg["rtus"].items()}
    start_ms = cfg["t_attack_start"] * 1000.0
    cycles = scada_cycles(trace, scada)
    baseline = [c.latency_ms for c in cycles if c.tx_ms < start_ms]
    attack = [c.latency_ms for c in cycles if c.tx_ms >= start_ms]
    report.baseline_cycles, report.attack_cycles = len(baseline), len(attack)
    try:
        raw = measure_mu_d(baseline, attack)
    except MetricsError as exc:
        log.warning("mu_d not available: %s", exc)
    else:
        report.mu_d_raw_ms = round(raw, 6)
        report.mu_d_ms = round(max(raw, 0.0), 6)
        if raw < 0:
            log.info("mu_d raw value %.6f ms floored to 0", raw)
    targets = {i: rtus[i] for i in cfg.get("targets", []) if i in rtus}
    if targets:
        report.delta_s_ms, report.delta_r_ms = measure_deltas(trace, scada, targets)
    return report


#
#   Output
#

def to_csv(reports: Union[MetricsReport, Sequence[MetricsReport]]) -> str:
    if isinstance(reports, MetricsReport):
        reports = [reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def to_json(report: MetricsReport) -> str:
    return json.dumps(asdict(report), indent=2, sort_keys=True) + "\n"


_HEADERS = ["T_S [s]", "T_C [s]", "T_M [s]", "Δs [ms]", "Δr [ms]", "μd [ms]", "n_B", "n_e",
            "μcpu [%]", "μram [%]"]


def to_table(reports: Union[MetricsReport, Sequence[MetricsReport]], labels: Optional[Sequence[str]] = None) -> str:
    if isinstance(reports, MetricsReport):
        reports = [reports]
    headers = (["scenario"] if labels else []) + _HEADERS
    rows = []
    for i, r in enumerate(reports):
        cells = [_fmt(r.T_S), _fmt(r.T_C), _fmt(r.T_M)]
        cells += [NA if v is None else f"{v:.1f}" for v in (r.delta_s_ms, r.delta_r_ms, r.mu_d_ms)]
        cells += [str(r.n_B), str(r.n_e)]
        cells += [NA if v is None else f"{v:.1f}" for v in (r.mu_cpu, r.mu_ram)]
        rows.append(([labels[i]] if labels else []) + cells)
    widths = [max(len(h), *(len(row[j]) for row in rows)) for j, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def emit_report(report, fmt: str = "table", path=None) -> str:
    if fmt == "csv":
        text = to_csv(report)
    elif fmt == "json":
        text = to_json(report)
    elif fmt == "table":
        text = to_table(report)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
