"""Defender-side nodes: Modbus RTUs wrapping the tanks, and the SCADA server
that polls them and runs a hysteresis pump controller."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .. import modbus
from ..modbus import MbapHeader, ReadCoilsRequest, ReadHoldingRegistersRequest, WriteSingleCoilRequest
from ..netfabric import Channel, Fabric, Frame, NodeAddr, seconds_to_us
from ..process import RegisterMap, Substation, level_from_register

log = logging.getLogger(__name__)

MODBUS_PORT = 502
SCADA_PORT = 40000


def modbus_meta(txn: int, pdu, role: str, substation: int) -> dict:
    return {"txn": txn, "fc": getattr(pdu, "function", 0), "role": role, "sub": substation}


class RtuNode:
    """Serves its substation's data store over Modbus/TCP."""

    def __init__(self, fabric: Fabric, addr: NodeAddr, substation: Substation, plant_dt: float):
        self.fabric = fabric
        self.addr = addr
        self.substation = substation
        self.plant_dt = plant_dt
        self.served = 0
        self.history: List[Tuple[int, int]] = []  # (t_us, level register)
        fabric.bind(addr, self)
        fabric.every(plant_dt, addr.host, self._tick, "plant", start_s=0.0)

    def _tick(self) -> None:
        self.substation.tick(self.fabric.now, self.plant_dt)
        self.history.append((self.fabric.now_us, int(self.substation.store.holding_registers[
            self.substation.rmap.level])))

    def on_frame(self, frame: Frame) -> None:
        try:
            header, request = modbus.decode_frame(frame.data, expect="request")
            meta = modbus_meta(header.transaction_id, request, "response", self.substation.index)
        except modbus.ModbusError:
            meta = {"role": "response", "sub": self.substation.index}
        try:
            reply = modbus.serve_frame(self.substation.store, frame.data)
        except modbus.ModbusError as exc:
            log.debug("rtu%d: dropping malformed frame: %s", self.substation.index, exc)
            return
        self.served += 1
        self.fabric.stream_send(frame.channel, self.addr, frame.src, reply, kind="modbus", meta=meta)

    def on_reset(self, channel: Channel) -> None:
        pass


@dataclass
class Outstanding:
    rtu: int
    request: object
    data: bytes
    first_tx_us: int
    tx_us: int
    channel_id: str


@dataclass
class Reading:
    t_us: int
    substation: int
    kind: str  # "hrs" or "cos"
    offset: int
    values: Tuple[int, ...]
    latency_us: int
    spoofed_path: bool = False


class ScadaNode:
    """Polls every RTU each ``T_S`` and keeps tanks between two thresholds."""

    def __init__(self, fabric: Fabric, addr: NodeAddr, rtus: Dict[int, NodeAddr], T_S: float,
                 capacities: Dict[int, float], rmap: Optional[RegisterMap] = None,
                 stream_mode: str = "shared", first_poll: float = 0.5,
                 low: float = 0.4, high: float = 0.8):
        self.fabric = fabric
        self.addr = addr
        self.rtus = dict(rtus)
        self.T_S = T_S
        self.capacities = capacities
        self.rmap = rmap or RegisterMap()
        self.stream_mode = stream_mode
        self.low, self.high = low, high
        self.channels: Dict[int, Channel] = {}
        self.outstanding: Dict[Tuple[int, int], Outstanding] = {}
        self.readings: List[Reading] = []
        self.pump_state: Dict[int, Optional[bool]] = {i: None for i in rtus}
        self.missed = 0
        self.late = 0
        self.writes = 0
        self.resets = 0
        self.cycles = 0
        self._txn = itertools.cycle(range(1, 0x10000))
        fabric.bind(addr, self)
        fabric.every(T_S, addr.host, self.poll, "scada poll", start_s=first_poll)

    # streams

    def _channel_for(self, rtu: int) -> Channel:
        key = 0 if self.stream_mode == "shared" else rtu
        ch = self.channels.get(key)
        if ch is None or not ch.open:
            peers = list(self.rtus.values()) if key == 0 else self.rtus[rtu]
            ch = self.fabric.open_stream(self.addr, peers)
            self.channels[key] = ch
        return ch

    def _send(self, rtu: int, request, txn: Optional[int] = None, first_tx_us: Optional[int] = None) -> None:
        txn = next(self._txn) if txn is None else txn
        data = modbus.encode_frame(MbapHeader(txn, 1), request)
        ch = self._channel_for(rtu)
        now = self.fabric.now_us
        self.outstanding[(rtu, txn)] = Outstanding(rtu, request, data, now if first_tx_us is None else first_tx_us,
                                                   now, ch.id)
        self.fabric.stream_send(ch, self.addr, self.rtus[rtu], data, kind="modbus",
                                meta=modbus_meta(txn, request, "request", rtu))

    def poll(self) -> None:
        now = self.fabric.now_us
        for key, out in list(self.outstanding.items()):
            if now - out.first_tx_us >= seconds_to_us(self.T_S):
                self.missed += 1
                del self.outstanding[key]
                self.fabric.log("scada-missed", str(self.addr), {"sub": out.rtu, "txn": key[1]})
        self.cycles += 1
        for rtu in sorted(self.rtus):
            self._send(rtu, ReadHoldingRegistersRequest(self.rmap.level, 4))
            self._send(rtu, ReadCoilsRequest(self.rmap.pump, 2))

    def on_reset(self, channel: Channel) -> None:
        self.resets += 1
        self.fabric.log("scada-reconnect", str(self.addr), {"channel": channel.id})
        for (rtu, txn), out in sorted(self.outstanding.items()):
            if out.channel_id == channel.id:
                self._send(rtu, out.request, txn=txn, first_tx_us=out.first_tx_us)

    # responses

    def on_frame(self, frame: Frame) -> None:
        rtu = next((i for i, a in self.rtus.items() if a == frame.src), None)
        try:
            header, response = modbus.decode_frame(frame.data, expect="response")
        except modbus.ModbusError as exc:
            log.warning("scada: undecodable frame from %s: %s", frame.src, exc)
            return
        out = self.outstanding.pop((rtu, header.transaction_id), None)
        if out is None:
            return
        now = self.fabric.now_us
        if now - out.first_tx_us > seconds_to_us(self.T_S):
            self.late += 1
        if isinstance(response, modbus.ExceptionResponse):
            self.fabric.log("scada-exception", str(self.addr), {"sub": rtu, "code": response.code})
            return
        req = out.request
        if isinstance(req, ReadHoldingRegistersRequest):
            values = tuple(response.register_values)
            self.readings.append(Reading(now, rtu, "hrs", req.offset, values, now - out.tx_us,
                                         frame.kind == "spoofed"))
            self._control(rtu, values[0])
        elif isinstance(req, ReadCoilsRequest):
            values = tuple(int(c) for c in response.coils(req.count))
            self.readings.append(Reading(now, rtu, "cos", req.offset, values, now - out.tx_us,
                                         frame.kind == "spoofed"))
            self.pump_state[rtu] = bool(values[0])

    def _control(self, rtu: int, level_raw: int) -> None:
        fill = level_from_register(level_raw) / self.capacities[rtu]
        pump = self.pump_state.get(rtu)
        if fill < self.low and pump is not True:
            want = True
        elif fill > self.high and pump is not False:
            want = False
        else:
            return
        self.writes += 1
        self.pump_state[rtu] = want
        self._send(rtu, WriteSingleCoilRequest(self.rmap.pump, want))

    def levels(self, rtu: int) -> List[Tuple[int, int]]:
        return [(r.t_us, r.values[0]) for r in self.readings if r.substation == rtu and r.kind == "hrs"]
