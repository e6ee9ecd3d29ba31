"""Bot and command-and-control nodes of the centralized botnet.

Bots sit on the gateway between an RTU and its access router and combine
the Infiltrator, Forger, Pub and Sub traits. The C&C node hosts the broker
and the Controller. All coordination flows over the pub-sub topic tree::

    subX/rtuX/<hrs|irs|cos|dis>/<hr|ir|co|di><index>/<request|response>
    cpsb/<node>/<dead|sw|go>
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from . import modbus
from .modbus import (
    DataStore, MbapHeader, ReadCoilsRequest, ReadHoldingRegistersRequest, WriteSingleCoilRequest,
)
from .netfabric import BRIDGE, ISOLATE, Fabric, Frame, Link, NodeAddr, seconds_to_us
from .process import (
    FLOW_SCALE, LEVEL_SCALE, RegisterMap, SubstationSpec, SubstationState, flow_from_register,
    level_from_register, recompute_flows, step, to_register,
)
from .pubsub import Broker, Message, PubSubClient, match_filter

log = logging.getLogger(__name__)

DATATYPES = {"hrs": "hr", "irs": "ir", "cos": "co", "dis": "di"}
KINDS = ("request", "response")

# message roles carried in payloads
OBSERVATION = "obs"
REQUEST = "req"
WRITE = "write"
ESTIMATE = "est"
REPLAY = "replay"

DEFAULT_QOS = {"dead": 2, "go": 2, "estimate": 1, "replay": 1, "observation": 0, "request": 0,
               "subscribe": 1}


class BotnetError(Exception):
    pass


#
#   Topic tree
#

def device_name(substation: int) -> str:
    return f"rtu{substation}"


def topic_for(substation: int, device: str, datatype: str, index: int, kind: str) -> str:
    if datatype not in DATATYPES:
        raise BotnetError(f"unknown datatype {datatype!r}")
    if kind not in KINDS:
        raise BotnetError(f"unknown kind {kind!r}")
    if substation < 1 or not device:
        raise BotnetError(f"invalid substation/device {substation}/{device}")
    return f"sub{substation}/{device}/{datatype}/{DATATYPES[datatype]}{index}/{kind}"


def management_topic(node: str, what: str) -> str:
    return f"cpsb/{node}/{what}"


class Address(NamedTuple):
    substation: int
    datatype: str
    index: int

    def __str__(self) -> str:
        return f"sub{self.substation}/{self.datatype}/{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Address":
        parts = text.split("/")
        if len(parts) != 3 or not parts[0].startswith("sub") or parts[1] not in DATATYPES:
            raise BotnetError(f"address must look like sub<N>/<hrs|cos|...>/<index>: {text!r}")
        try:
            return cls(int(parts[0][3:]), parts[1], int(parts[2]))
        except ValueError:
            raise BotnetError(f"bad address {text!r}") from None

    def topic(self, kind: str) -> str:
        return topic_for(self.substation, device_name(self.substation), self.datatype, self.index, kind)


def parse_data_topic(topic: str) -> Optional[Tuple[Address, str, str]]:
    """Split a substation topic into (address, device, kind)."""
    parts = topic.split("/")
    if len(parts) != 5 or not parts[0].startswith("sub") or parts[2] not in DATATYPES:
        return None
    prefix = DATATYPES[parts[2]]
    if not parts[3].startswith(prefix) or parts[4] not in KINDS:
        return None
    try:
        return Address(int(parts[0][3:]), parts[2], int(parts[3][len(prefix):])), parts[1], parts[4]
    except ValueError:
        return None


def encode_payload(role: str, value=None, t_us: Optional[int] = None, **extra) -> bytes:
    obj = {"k": role}
    if value is not None:
        obj["v"] = int(value)
    if t_us is not None:
        obj["t"] = t_us
    obj.update(extra)
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def decode_payload(data: bytes) -> dict:
    try:
        obj = json.loads(data.decode() or "{}")
    except (UnicodeDecodeError, json.JSONDecodeError):
        return {}
    return obj if isinstance(obj, dict) else {}


#
#   Traits
#

@dataclass(frozen=True)
class TraitSet:
    infiltrator: bool = False
    forger: bool = False
    controller: bool = False
    broker: bool = False
    pub: bool = False
    sub: bool = False

    @classmethod
    def of(cls, names: Iterable[str]) -> "TraitSet":
        names = set(names)
        unknown = names - set(cls.__dataclass_fields__)
        if unknown:
            raise BotnetError(f"unknown traits: {', '.join(sorted(unknown))}")
        return cls(**{n: True for n in names})

    @property
    def names(self) -> List[str]:
        return [n for n in self.__dataclass_fields__ if getattr(self, n)]


BOT_TRAITS = TraitSet(infiltrator=True, forger=True, pub=True, sub=True)
CNC_TRAITS = TraitSet(controller=True, broker=True, pub=True, sub=True)


def trait_errors(bot: TraitSet, cnc: TraitSet, impersonation: bool) -> List[str]:
    out = []
    for name in ("infiltrator", "forger", "pub", "sub"):
        if not getattr(bot, name):
            out.append(f"bot traits must include {name}")
    if bot.controller:
        out.append("bots must not carry the controller trait in the centralized design")
    for name in ("broker", "pub", "sub"):
        if not getattr(cnc, name):
            out.append(f"C&C traits must include {name}")
    if impersonation and not cnc.controller:
        out.append("impersonation requires the controller trait on the C&C")
    return out


#
#   Controller
#

class ObservationCache:
    """Last observed value per (substation, device, datatype, index)."""

    def __init__(self):
        self.values: Dict[Tuple[int, str, str, int], Tuple[int, int]] = {}
        self.frozen: set = set()

    def update(self, address: Address, value: int, t_us: int, device: Optional[str] = None) -> bool:
        if address.substation in self.frozen:
            return False
        key = (address.substation, device or device_name(address.substation), address.datatype, address.index)
        prev = self.values.get(key)
        if prev is not None and prev[1] > t_us:
            return False
        self.values[key] = (int(value), t_us)
        return True

    def get(self, address: Address, device: Optional[str] = None) -> Optional[int]:
        hit = self.values.get((address.substation, device or device_name(address.substation),
                               address.datatype, address.index))
        return None if hit is None else hit[0]

    def timestamp(self, address: Address) -> Optional[int]:
        hit = self.values.get((address.substation, device_name(address.substation),
                               address.datatype, address.index))
        return None if hit is None else hit[1]

    def freeze(self, substation: int) -> None:
        self.frozen.add(substation)


class Strategy:
    """Produces one value per requested address."""

    default: int = 0

    def estimate(self, cache: ObservationCache, addresses: Sequence[Address], now_s: float) -> List[int]:
        raise NotImplementedError

    def command(self, address: Address, value: int) -> None:
        """Actuator write issued by the defender and seen on a request topic."""

    def _held(self, cache: ObservationCache, address: Address) -> int:
        value = cache.get(address)
        if value is None:
            log.info("no observation for %s, using default %d", address, self.default)
            return self.default
        return value


@dataclass
class HoldLastValue(Strategy):
    default: int = 0

    def estimate(self, cache, addresses, now_s):
        return [self._held(cache, a) for a in addresses]


@dataclass
class Constant(Strategy):
    values: Dict[Address, int] = field(default_factory=dict)
    default: int = 0

    def estimate(self, cache, addresses, now_s):
        return [self.values[a] if a in self.values else self._held(cache, a) for a in addresses]


@dataclass
class CrossReplay(Strategy):
    mapping: Dict[Address, Address] = field(default_factory=dict)
    default: int = 0

    def estimate(self, cache, addresses, now_s):
        return [self._held(cache, self.mapping.get(a, a)) for a in addresses]


class ProcessModelEstimate(Strategy):
    """Shadow tank model per substation, seeded from the last observations
    and driven by the actuator commands the defender keeps sending."""

    def __init__(self, specs: Dict[int, SubstationSpec], rmap: Optional[RegisterMap] = None,
                 period_s: float = 1.0, default: int = 0):
        self.specs = specs
        self.rmap = rmap or RegisterMap()
        self.period_s = period_s
        self.default = default
        self.shadow: Dict[int, SubstationState] = {}
        self.clock: Dict[int, float] = {}
        self.pending: Dict[int, Dict[str, bool]] = {}

    def _seed(self, cache: ObservationCache, sub: int, now_s: float) -> None:
        spec = self.specs[sub]
        rm = self.rmap

        def reg(idx, default):
            v = cache.get(Address(sub, "hrs", idx))
            return default if v is None else v

        def coil(idx, default):
            v = cache.get(Address(sub, "cos", idx))
            return default if v is None else bool(v)

        state = SubstationState(
            level=level_from_register(reg(rm.level, to_register(spec.initial_level, LEVEL_SCALE))),
            pump_on=coil(rm.pump, spec.pump_on), valve_open=coil(rm.valve, spec.valve_open),
            demand=flow_from_register(reg(rm.demand, to_register(spec.demand_mean, FLOW_SCALE))))
        self.shadow[sub] = recompute_flows(state, spec)
        self.clock[sub] = now_s

    def command(self, address: Address, value: int) -> None:
        if address.datatype != "cos":
            return
        names = {self.rmap.pump: "pump_on", self.rmap.valve: "valve_open"}
        if address.index in names:
            self.pending.setdefault(address.substation, {})[names[address.index]] = bool(value)

    def advance(self, sub: int, now_s: float) -> SubstationState:
        spec = self.specs[sub]
        state = self.shadow[sub]
        while now_s - self.clock[sub] >= self.period_s - 1e-9:
            state = step(state, self.period_s, spec)
            self.clock[sub] += self.period_s
        if sub in self.pending:
            for name, value in self.pending.pop(sub).items():
                setattr(state, name, value)
            state = recompute_flows(state, spec)
        self.shadow[sub] = state
        return state

    def estimate(self, cache, addresses, now_s):
        out = []
        for a in addresses:
            if a.substation not in self.specs:
                out.append(self._held(cache, a))
                continue
            if a.substation not in self.shadow:
                self._seed(cache, a.substation, now_s)
            state = self.advance(a.substation, now_s)
            out.append(self._value(cache, a, state))
        return out

    def _value(self, cache, a: Address, state: SubstationState) -> int:
        rm = self.rmap
        if a.datatype == "hrs":
            if a.index == rm.level:
                return to_register(state.level, LEVEL_SCALE)
            if a.index == rm.inflow:
                return to_register(state.inflow, FLOW_SCALE)
            if a.index == rm.outflow:
                return to_register(state.outflow, FLOW_SCALE)
            if a.index == rm.demand:
                return to_register(state.demand, FLOW_SCALE)
        if a.datatype == "cos":
            if a.index == rm.pump:
                return int(state.pump_on)
            if a.index == rm.valve:
                return int(state.valve_open)
        return self._held(cache, a)


def controller_estimate(strategy: Strategy, cache: ObservationCache, addresses: Sequence[Address],
                        now_s: float = 0.0) -> List[int]:
    values = strategy.estimate(cache, list(addresses), now_s)
    if len(values) != len(addresses):
        raise BotnetError("strategy returned the wrong number of values")
    return values


#
#   Forger
#

def forge_response(request, header: MbapHeader, values: Sequence) -> bytes:
    """Encode the reply a genuine RTU holding ``values`` would send."""
    if isinstance(request, WriteSingleCoilRequest):
        pdu = modbus.WriteSingleCoilResponse(request.offset, request.value)
    else:
        if len(values) != request.count:
            raise BotnetError(f"need {request.count} values, got {len(values)}")
        pdu = modbus.register_values_for(request, values)
    return modbus.encode_frame(MbapHeader(header.transaction_id, header.unit_id), pdu)


def request_addresses(substation: int, request) -> List[Address]:
    if isinstance(request, ReadHoldingRegistersRequest):
        return [Address(substation, "hrs", request.offset + i) for i in range(request.count)]
    if isinstance(request, ReadCoilsRequest):
        return [Address(substation, "cos", request.offset + i) for i in range(request.count)]
    if isinstance(request, WriteSingleCoilRequest):
        return [Address(substation, "cos", request.offset)]
    return []


def response_values(request, response) -> Optional[List[int]]:
    if isinstance(response, modbus.ReadHoldingRegistersResponse):
        return list(response.register_values)
    if isinstance(response, modbus.ReadCoilsResponse) and isinstance(request, ReadCoilsRequest):
        try:
            return [int(b) for b in response.coils(request.count)]
        except modbus.ModbusError:
            return None
    if isinstance(response, modbus.WriteSingleCoilResponse):
        return [int(response.value)]
    return None


def store_values(store: DataStore, addresses: Sequence[Address], values: Sequence[int]) -> None:
    for a, v in zip(addresses, values):
        table = store.holding_registers if a.datatype == "hrs" else store.coils
        if 0 <= a.index < len(table):
            table[a.index] = v


def store_read(store: DataStore, a: Address) -> int:
    table = store.holding_registers if a.datatype == "hrs" else store.coils
    return int(table[a.index]) if 0 <= a.index < len(table) else 0


#
#   Nodes
#

@dataclass
class BotConfig:
    T_M: float = 0.6
    serve_delay_s: float = 0.0
    spoof_start_delay_s: float = 0.0
    mirror_timing: bool = True
    force_coils: Dict[int, bool] = field(default_factory=dict)
    keep_alive: int = 60
    retry_s: float = 0.2
    qos: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_QOS))


@dataclass
class _Pending:
    frame: Frame
    header: MbapHeader
    request: object
    t_us: int


class Bot:
    """A compromised gateway: bridges, mirrors, isolates and impersonates."""

    traits = BOT_TRAITS
    MODBUS_CLIENT_PORT = 40001
    PUBSUB_PORT = 1884

    def __init__(self, fabric: Fabric, index: int, host: str, rtu: NodeAddr, link: Link,
                 broker: NodeAddr, config: Optional[BotConfig] = None, rmap: Optional[RegisterMap] = None):
        self.fabric = fabric
        self.index = index
        self.name = f"bot{index}"
        self.host = host
        self.rtu = rtu
        self.link = link
        self.config = config or BotConfig()
        self.rmap = rmap or RegisterMap()
        network, host_id = host.split("/")
        self.modbus_addr = NodeAddr(network, host_id, self.MODBUS_CLIENT_PORT)
        self.client = PubSubClient(fabric, NodeAddr(network, host_id, self.PUBSUB_PORT), self.name, broker,
                                   clean=False, keep_alive=self.config.keep_alive, retry_s=self.config.retry_s)
        self.client.on_message = self._on_message
        self.genuine = DataStore()
        self.mirror: Optional[DataStore] = None
        self.mode: Optional[str] = None
        self.impersonating = False
        self.replay_targets: set = set()
        self.replay_sources: Dict[Address, List[Address]] = {}
        self.instructions: Dict[Address, int] = {}
        self.serving_from_us: Optional[int] = None
        self.observed: Dict[Tuple[str, int], Tuple[MbapHeader, object]] = {}
        self.relays: Dict[int, _Pending] = {}
        self.queued: List[_Pending] = []
        self.relay_channel = None
        self._relay_txn = itertools.cycle(range(1, 0x10000))
        self.spoofed_responses = 0
        self.source_log: List[Tuple[int, Address, int]] = []
        self.forge_log: List[Tuple[int, Address, int]] = []
        fabric.attach(host, link, self)
        fabric.bind(self.modbus_addr, _RelayEndpoint(self))

    # Infiltrator

    def infiltrator_bridge(self) -> None:
        self.fabric.set_tap(self.link, BRIDGE, self.host)
        self.mode = BRIDGE
        self.fabric.log("tap", self.host, {"mode": BRIDGE, "bot": self.name})

    def infiltrator_isolate(self) -> None:
        if self.mode != BRIDGE:
            raise BotnetError(f"{self.name}: bridge must be established before isolation")
        self.mirror = self.genuine.copy()
        self._apply_instructions()
        self.fabric.set_tap(self.link, ISOLATE, self.host)
        self.mode = ISOLATE
        self.serving_from_us = self.fabric.now_us + seconds_to_us(self.config.spoof_start_delay_s)
        self.fabric.log("tap", self.host, {"mode": ISOLATE, "bot": self.name})
        self.fabric.every(self.config.T_M, self.host, self._refresh, f"{self.name} T_M")
        if self.config.spoof_start_delay_s > 0:
            self.fabric.schedule(self.serving_from_us, self.host, self._drain_queue, f"{self.name} serve")
        self._force_actuators()

    def accepts(self, peer: NodeAddr) -> bool:
        return peer == self.rtu

    def on_observe(self, frame: Frame) -> None:
        towards_rtu = frame.dst.host == self.rtu.host
        try:
            header, pdu = modbus.decode_frame(frame.data, expect="request" if towards_rtu else "response")
        except modbus.ModbusError as exc:
            log.debug("%s: forwarding undecodable frame untouched: %s", self.name, exc)
            return
        key = (frame.channel.id, header.transaction_id)
        if towards_rtu:
            if modbus.is_request(pdu):
                self.observed[key] = (header, pdu)
                self._publish_request(pdu)
            return
        seen = self.observed.pop(key, None)
        if seen is not None:
            self._record_genuine(seen[1], pdu)

    def on_intercept(self, frame: Frame) -> None:
        try:
            header, request = modbus.decode_frame(frame.data, expect="request")
        except modbus.ModbusError as exc:
            log.debug("%s: dropping undecodable intercepted frame: %s", self.name, exc)
            return
        if not modbus.is_request(request):
            return
        pending = _Pending(frame, header, request, self.fabric.now_us)
        self._publish_request(request)
        if isinstance(request, WriteSingleCoilRequest) and self.mirror is not None:
            # the defender believes the write happened
            store_values(self.mirror, request_addresses(self.index, request), [int(request.value)])
        if self.fabric.now_us < (self.serving_from_us or 0) or self.queued:
            self.queued.append(pending)
            return
        self._serve(pending)

    def _drain_queue(self) -> None:
        queued, self.queued = self.queued, []
        for pending in queued:
            self._serve(pending)

    def _serve(self, pending: _Pending) -> None:
        if not self.config.mirror_timing:
            self._respond(pending, None)
            return
        # keep genuine timing: ask the real RTU, answer when it does
        request = pending.request
        if isinstance(request, WriteSingleCoilRequest):
            request = ReadCoilsRequest(request.offset, 1)
        txn = next(self._relay_txn)
        self.relays[txn] = pending
        self._send_to_rtu(txn, request)

    def _send_to_rtu(self, txn: int, request) -> None:
        if self.relay_channel is None or not self.relay_channel.open:
            self.relay_channel = self.fabric.open_stream(self.modbus_addr, self.rtu)
        frame = modbus.encode_frame(MbapHeader(txn, 1), request)
        self.fabric.stream_send(self.relay_channel, self.modbus_addr, self.rtu, frame, kind="modbus",
                                meta=_modbus_meta(txn, request, "request", self.index))

    def _on_rtu_reply(self, frame: Frame) -> None:
        try:
            header, response = modbus.decode_frame(frame.data, expect="response")
        except modbus.ModbusError:
            return
        pending = self.relays.pop(header.transaction_id, None)
        if pending is None:
            return
        probe = pending.request
        if isinstance(probe, WriteSingleCoilRequest):
            probe = ReadCoilsRequest(probe.offset, 1)
        self._record_genuine(probe, response)
        self._respond(pending, response)

    def _respond(self, pending: _Pending, genuine_response) -> None:
        request = pending.request
        addresses = request_addresses(self.index, request)
        if isinstance(genuine_response, modbus.ExceptionResponse):
            data = modbus.encode_frame(MbapHeader(pending.header.transaction_id, pending.header.unit_id),
                                       genuine_response)
        else:
            values = self._forged_values(request, addresses, genuine_response)
            data = forge_response(request, pending.header, values)
            for a, v in zip(addresses, values):
                self.forge_log.append((self.fabric.now_us, a, v))
        delay = seconds_to_us(self.config.serve_delay_s)
        frame = pending.frame

        def send():
            sent = self.fabric.stream_send(frame.channel, frame.dst, frame.src, data, kind="spoofed",
                                           meta=_modbus_meta(pending.header.transaction_id, request, "response",
                                                             self.index, actor=self.name),
                                           actor=self.host)
            if sent:
                self.spoofed_responses += 1

        if delay:
            self.fabric.schedule(self.fabric.now_us + delay, self.host, send, f"{self.name} forge")
        else:
            send()

    def _forged_values(self, request, addresses: List[Address], genuine_response) -> List[int]:
        genuine = None if genuine_response is None else response_values(
            ReadCoilsRequest(request.offset, 1) if isinstance(request, WriteSingleCoilRequest) else request,
            genuine_response)
        if isinstance(request, WriteSingleCoilRequest):
            return [int(request.value)]
        out = []
        for i, a in enumerate(addresses):
            spoof = self.impersonating or a in self.replay_targets or genuine is None
            out.append(store_read(self.mirror, a) if spoof and self.mirror is not None else
                       (genuine[i] if genuine is not None else store_read(self.genuine, a)))
        return out

    def _refresh(self) -> None:
        self._apply_instructions()
        self._force_actuators()

    def _apply_instructions(self) -> None:
        if self.mirror is None:
            return
        for a, v in self.instructions.items():
            store_values(self.mirror, [a], [v])
        self.instructions.clear()

    def _force_actuators(self) -> None:
        if not (self.impersonating and self.config.force_coils):
            return
        for coil, value in sorted(self.config.force_coils.items()):
            if bool(self.genuine.coils[coil]) != value:
                self._send_to_rtu(next(self._relay_txn), WriteSingleCoilRequest(coil, value))
                self.genuine.coils[coil] = value

    # Pub / Sub

    def _publish(self, topic: str, payload: bytes, qos_key: str) -> None:
        self.client.publish(topic, payload, self.config.qos.get(qos_key, 0))

    def _publish_request(self, request) -> None:
        now = self.fabric.now_us
        for a in request_addresses(self.index, request):
            if isinstance(request, WriteSingleCoilRequest):
                self._publish(a.topic("request"), encode_payload(WRITE, int(request.value), now), "estimate")
            else:
                self._publish(a.topic("request"), encode_payload(REQUEST, None, now), "request")

    def _record_genuine(self, request, response) -> None:
        values = response_values(request, response)
        if values is None or isinstance(request, WriteSingleCoilRequest):
            return
        now = self.fabric.now_us
        addresses = request_addresses(self.index, request)
        store_values(self.genuine, addresses, values)
        for a, v in zip(addresses, values):
            self._publish(a.topic("response"), encode_payload(OBSERVATION, v, now), "observation")
            for target in self.replay_sources.get(a, ()):
                self.source_log.append((now, a, v))
                self._publish(target.topic("response"), encode_payload(REPLAY, v, now, src=str(a)), "replay")

    def _on_message(self, msg: Message) -> None:
        if msg.topic.startswith("cpsb/"):
            self._on_management(msg)
            return
        parsed = parse_data_topic(msg.topic)
        if parsed is None:
            return
        address, _, kind = parsed
        payload = decode_payload(msg.payload)
        if kind != "response" or address.substation != self.index or "v" not in payload:
            return
        if payload.get("k") == ESTIMATE and self.impersonating:
            self.instructions[address] = payload["v"]
        elif payload.get("k") == REPLAY and address in self.replay_targets:
            self.instructions[address] = payload["v"]

    def _on_management(self, msg: Message) -> None:
        parts = msg.topic.split("/")
        if len(parts) == 3 and parts[1] == "cnc" and parts[2] == "go":
            self._on_go(decode_payload(msg.payload))
        elif len(parts) == 3 and parts[2] == "dead":
            self.fabric.log("dead", self.host, {"bot": self.name, "node": parts[1]})
        elif len(parts) == 3 and parts[1] == self.name and parts[2] == "sw":
            self.fabric.log("sw-update", self.host, {"bot": self.name, "bytes": len(msg.payload)})

    def _on_go(self, order: dict) -> None:
        start_us = int(order.get("t_start_us", self.fabric.now_us))
        isolate = False
        if self.index in order.get("impersonate", []):
            self.impersonating = True
            isolate = True
        for src, dst in order.get("replay", []):
            src, dst = Address.parse(src), Address.parse(dst)
            if src.substation == self.index:
                self.replay_sources.setdefault(src, []).append(dst)
            if dst.substation == self.index:
                self.replay_targets.add(dst)
                isolate = True
        if isolate and self.mode == BRIDGE:
            self.fabric.schedule(max(start_us, self.fabric.now_us), self.host, self.infiltrator_isolate,
                                 f"{self.name} isolate")

    def start(self) -> None:
        self.client.connect()
        self.client.subscribe(f"sub{self.index}/*", self.config.qos.get("subscribe", 1))
        self.client.subscribe("cpsb/+/dead", self.config.qos.get("dead", 2))
        self.client.subscribe(management_topic("cnc", "go"), self.config.qos.get("go", 2))
        self.client.subscribe(management_topic(self.name, "sw"), 1)


class _RelayEndpoint:
    def __init__(self, bot: Bot):
        self.bot = bot

    def on_frame(self, frame: Frame) -> None:
        self.bot._on_rtu_reply(frame)

    def on_reset(self, channel) -> None:
        self.bot.relay_channel = None


def _modbus_meta(txn: int, pdu, role: str, substation: int, actor: Optional[str] = None) -> dict:
    meta = {"txn": txn, "fc": getattr(pdu, "function", 0), "role": role, "sub": substation}
    if actor:
        meta["actor"] = actor
    return meta


class CommandAndControl:
    """C&C node: broker plus the Controller that feeds estimates to bots."""

    traits = CNC_TRAITS
    PUBSUB_PORT = 1884

    def __init__(self, fabric: Fabric, host: str, strategy: Strategy, T_C: float,
                 n_substations: int, qos: Optional[Dict[str, int]] = None, retry_s: float = 0.2,
                 keep_alive: int = 60):
        self.fabric = fabric
        self.host = host
        network, host_id = host.split("/")
        self.broker = Broker(fabric, NodeAddr(network, host_id, 1883), retry_s=retry_s)
        self.client = PubSubClient(fabric, NodeAddr(network, host_id, self.PUBSUB_PORT), "cnc",
                                   self.broker.addr, clean=False, keep_alive=keep_alive, retry_s=retry_s)
        self.client.on_message = self._on_message
        self.strategy = strategy
        self.T_C = T_C
        self.n_substations = n_substations
        self.qos = dict(DEFAULT_QOS, **(qos or {}))
        self.cache = ObservationCache()
        self.ground_truth = ObservationCache()
        self.requested: Dict[int, Dict[Address, None]] = {}
        self.mode = "idle"
        self.estimations = 0
        self.targets: List[int] = []
        self.dead: List[str] = []

    def start(self) -> None:
        self.client.connect()
        self.client.subscribe("cpsb/+/dead", self.qos["dead"])
        for i in range(1, self.n_substations + 1):
            self.client.subscribe(f"sub{i}/*", self.qos["subscribe"])

    def develop_strategy(self, t_start_s: float, impersonate: Sequence[int],
                         replay: Sequence[Tuple[str, str]]) -> None:
        self.mode = "observing"
        self.targets = list(impersonate)
        order = {"t_start_us": seconds_to_us(t_start_s), "impersonate": list(impersonate),
                 "replay": [list(m) for m in replay]}
        self.client.publish(management_topic("cnc", "go"),
                            json.dumps(order, separators=(",", ":"), sort_keys=True).encode(), self.qos["go"])

    def deliver(self) -> None:
        self.mode = "delivering"
        for sub in self.targets:
            self.cache.freeze(sub)
        if self.targets:
            self.estimate_and_publish()
            self.fabric.every(self.T_C, self.host, self.estimate_and_publish, "cnc T_C")

    def estimate_and_publish(self) -> None:
        now = self.fabric.now_us
        for sub in self.targets:
            addresses = list(self.requested.get(sub, {}))
            if not addresses:
                continue
            values = controller_estimate(self.strategy, self.cache, addresses, now / 1e6)
            self.estimations += 1
            for a, v in zip(addresses, values):
                self.client.publish(a.topic("response"), encode_payload(ESTIMATE, v, now), self.qos["estimate"])

    def _on_message(self, msg: Message) -> None:
        if match_filter("cpsb/+/dead", msg.topic):
            node = msg.topic.split("/")[1]
            self.dead.append(node)
            self.fabric.log("dead", self.host, {"node": node})
            return
        parsed = parse_data_topic(msg.topic)
        if parsed is None:
            return
        address, _, kind = parsed
        payload = decode_payload(msg.payload)
        role = payload.get("k")
        t = int(payload.get("t", self.fabric.now_us))
        if role == OBSERVATION:
            self.ground_truth.update(address, payload["v"], t)
            if self.mode != "idle":
                self.cache.update(address, payload["v"], t)
        elif role in (REQUEST, WRITE) and kind == "request":
            self.requested.setdefault(address.substation, {})[address] = None
            if role == WRITE:
                self.strategy.command(address, payload.get("v", 0))
