"""Topic-based publish/subscribe broker and client running over the fabric's
datagram channels.

Semantics follow MQTT: QoS 0/1/2 with the two-phase handshake for QoS 2,
persistent sessions with offline queues, keep-alive expiry and wildcard
filters. The wildcards are ``+`` (exactly one level) and ``*`` (one or more
trailing levels, final position only). Framing is a compact private binary
layout, not MQTT wire format.
"""

from __future__ import annotations

import itertools
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, List, Optional, Tuple

from .netfabric import Fabric, NodeAddr, seconds_to_us

log = logging.getLogger(__name__)

SINGLE_LEVEL = "+"
MULTI_LEVEL = "*"
DEFAULT_KEEP_ALIVE = 60
KEEPALIVE_GRACE = 1.5
PUBSUB_PORT = 1883


class TopicError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


#
#   Topics
#

def parse_topic(text: str) -> Tuple[str, ...]:
    levels = tuple(text.split("/"))
    for level in levels:
        if not level:
            raise TopicError(f"empty level in topic {text!r}")
        if SINGLE_LEVEL in level or MULTI_LEVEL in level:
            raise TopicError(f"wildcard in topic {text!r}")
    return levels


def parse_filter(text: str) -> Tuple[str, ...]:
    levels = tuple(text.split("/"))
    for i, level in enumerate(levels):
        if not level:
            raise TopicError(f"empty level in filter {text!r}")
        if level == MULTI_LEVEL:
            if i != len(levels) - 1:
                raise TopicError(f"'{MULTI_LEVEL}' must be the last level in {text!r}")
        elif level != SINGLE_LEVEL and (SINGLE_LEVEL in level or MULTI_LEVEL in level):
            raise TopicError(f"wildcard must occupy a whole level in {text!r}")
    return levels


def match_filter(topic_filter, topic) -> bool:
    """True if ``topic`` is matched by ``topic_filter``. Both may be given as
    strings or as level tuples."""
    f = parse_filter(topic_filter) if isinstance(topic_filter, str) else tuple(topic_filter)
    t = parse_topic(topic) if isinstance(topic, str) else tuple(topic)
    for i, level in enumerate(f):
        if level == MULTI_LEVEL:
            return len(t) > i
        if i >= len(t):
            return False
        if level != SINGLE_LEVEL and level != t[i]:
            return False
    return len(t) == len(f)


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes = b""
    qos: int = 0

    def __post_init__(self):
        if self.qos not in (0, 1, 2):
            raise ProtocolError(f"invalid qos {self.qos}")
        parse_topic(self.topic)


#
#   Framing
#

CONNECT, CONNACK, PUBLISH, PUBACK, PUBREC, PUBREL, PUBCOMP = 0x10, 0x20, 0x30, 0x40, 0x50, 0x60, 0x70
SUBSCRIBE, SUBACK, PINGREQ, PINGRESP, DISCONNECT = 0x80, 0x90, 0xC0, 0xD0, 0xE0

PACKET_NAMES = {CONNECT: "CONNECT", CONNACK: "CONNACK", PUBLISH: "PUBLISH", PUBACK: "PUBACK",
                PUBREC: "PUBREC", PUBREL: "PUBREL", PUBCOMP: "PUBCOMP", SUBSCRIBE: "SUBSCRIBE",
                SUBACK: "SUBACK", PINGREQ: "PINGREQ", PINGRESP: "PINGRESP",
                DISCONNECT: "DISCONNECT"}

_HEAD = struct.Struct(">BBH")


@dataclass
class Packet:
    type: int
    pid: int = 0
    qos: int = 0
    dup: bool = False
    topic: str = ""
    payload: bytes = b""
    client_id: str = ""
    clean: bool = True
    keep_alive: int = DEFAULT_KEEP_ALIVE
    nonce: int = 0
    session_present: bool = False
    subscriptions: Tuple[Tuple[str, int], ...] = ()
    granted: Tuple[int, ...] = ()

    @property
    def name(self) -> str:
        return PACKET_NAMES.get(self.type, hex(self.type))


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack(">H", len(raw)) + raw


def _unpack_str(data: bytes, pos: int) -> Tuple[str, int]:
    (n,) = struct.unpack_from(">H", data, pos)
    pos += 2
    if pos + n > len(data):
        raise ProtocolError("string overruns packet")
    return data[pos:pos + n].decode(), pos + n


def encode_packet(p: Packet) -> bytes:
    flags = p.qos | (0x08 if p.dup else 0)
    if p.type == CONNECT:
        flags = 0x02 if p.clean else 0
        body = struct.pack(">HI", p.keep_alive, p.nonce) + _pack_str(p.client_id)
    elif p.type == CONNACK:
        body = struct.pack(">BI", int(p.session_present), p.nonce)
    elif p.type == PUBLISH:
        body = _pack_str(p.topic) + bytes(p.payload)
    elif p.type == SUBSCRIBE:
        body = struct.pack(">B", len(p.subscriptions)) + b"".join(
            _pack_str(f) + struct.pack(">B", q) for f, q in p.subscriptions)
    elif p.type == SUBACK:
        body = bytes(p.granted)
    else:
        body = b""
    return _HEAD.pack(p.type, flags, p.pid) + body


def decode_packet(data: bytes) -> Packet:
    if len(data) < _HEAD.size:
        raise ProtocolError("packet shorter than header")
    ptype, flags, pid = _HEAD.unpack_from(data)
    if ptype not in PACKET_NAMES:
        raise ProtocolError(f"unknown packet type 0x{ptype:02x}")
    p = Packet(ptype, pid)
    pos = _HEAD.size
    if ptype == CONNECT:
        p.clean = bool(flags & 0x02)
        p.keep_alive, p.nonce = struct.unpack_from(">HI", data, pos)
        p.client_id, _ = _unpack_str(data, pos + 6)
    elif ptype == CONNACK:
        present, p.nonce = struct.unpack_from(">BI", data, pos)
        p.session_present = bool(present)
    elif ptype == PUBLISH:
        p.qos = flags & 0x03
        p.dup = bool(flags & 0x08)
        p.topic, pos = _unpack_str(data, pos)
        p.payload = bytes(data[pos:])
    elif ptype == SUBSCRIBE:
        (n,) = struct.unpack_from(">B", data, pos)
        pos += 1
        subs = []
        for _ in range(n):
            f, pos = _unpack_str(data, pos)
            subs.append((f, data[pos]))
            pos += 1
        p.subscriptions = tuple(subs)
    elif ptype == SUBACK:
        p.granted = tuple(data[pos:])
    return p


#
#   Reliable outbound stream of PUBLISH packets
#

class _Outbox:
    """Sends queued messages one at a time; a QoS>0 message must complete its
    handshake before the next one leaves, which keeps delivery in order."""

    def __init__(self, fabric: Fabric, node: str, send: Callable[[Packet], None], retry_s: float):
        self.fabric = fabric
        self.node = node
        self.send = send
        self.retry_us = seconds_to_us(retry_s)
        self.queue: Deque[Message] = deque()
        self.inflight: Optional[Tuple[int, Message, int]] = None  # pid, message, awaited type
        self.active = False
        self._pids = itertools.cycle(range(1, 0x10000))
        self._token = 0

    def push(self, msg: Message) -> None:
        self.queue.append(msg)
        self.pump()

    def pump(self) -> None:
        while self.active and self.inflight is None and self.queue:
            msg = self.queue.popleft()
            if msg.qos == 0:
                self.send(Packet(PUBLISH, 0, 0, topic=msg.topic, payload=msg.payload))
                continue
            pid = next(self._pids)
            self.inflight = (pid, msg, PUBACK if msg.qos == 1 else PUBREC)
            self.send(Packet(PUBLISH, pid, msg.qos, topic=msg.topic, payload=msg.payload))
            self._arm()

    def resume(self) -> None:
        self.active = True
        if self.inflight is not None:
            self._retransmit()
        self.pump()

    def suspend(self, drop_qos0: bool = True) -> None:
        self.active = False
        if drop_qos0:
            self.queue = deque(m for m in self.queue if m.qos > 0)

    def on_ack(self, ptype: int, pid: int) -> None:
        if self.inflight is None or self.inflight[0] != pid:
            if ptype == PUBREC:
                # late duplicate PUBREC after we moved on: the peer still wants a PUBREL
                self.send(Packet(PUBREL, pid))
            return
        _, msg, awaited = self.inflight
        if ptype != awaited:
            return
        if ptype == PUBREC:
            self.inflight = (pid, msg, PUBCOMP)
            self.send(Packet(PUBREL, pid))
            self._arm()
            return
        self.inflight = None
        self.pump()

    def _arm(self) -> None:
        self._token += 1
        token = self._token
        self.fabric.schedule(self.fabric.now_us + self.retry_us, self.node,
                             lambda: self._on_timer(token), "pubsub retry")

    def _on_timer(self, token: int) -> None:
        if token == self._token and self.active and self.inflight is not None:
            self._retransmit()

    def _retransmit(self) -> None:
        pid, msg, awaited = self.inflight
        if awaited == PUBCOMP:
            self.send(Packet(PUBREL, pid))
        else:
            self.send(Packet(PUBLISH, pid, msg.qos, dup=True, topic=msg.topic, payload=msg.payload))
        self._arm()


def _send_packet(fabric: Fabric, src: NodeAddr, dst: NodeAddr, p: Packet) -> None:
    meta = {"type": p.name}
    if p.type == PUBLISH:
        meta.update(topic=p.topic, qos=p.qos)
    if p.pid:
        meta["pid"] = p.pid
    fabric.send_datagram(src, dst, encode_packet(p), kind="pubsub", meta=meta)


#
#   Broker
#

@dataclass
class Session:
    client_id: str
    clean: bool
    keep_alive: int = DEFAULT_KEEP_ALIVE
    subscriptions: Dict[str, int] = field(default_factory=dict)
    last_activity_us: int = 0
    online: bool = False
    addr: Optional[NodeAddr] = None
    nonce: int = 0
    outbox: Optional[_Outbox] = None
    rx_pending: set = field(default_factory=set)

    @property
    def offline_queue(self) -> List[Message]:
        return list(self.outbox.queue) if self.outbox and not self.online else []


@dataclass
class DeliveryReport:
    message: Message
    publisher: str
    recipients: List[Tuple[str, int]] = field(default_factory=list)
    queued: List[str] = field(default_factory=list)


class Broker:
    """Single logical broker; all events are processed in fabric order."""

    def __init__(self, fabric: Fabric, addr: NodeAddr, retry_s: float = 0.2,
                 keepalive_check_s: Optional[float] = 0.5):
        self.fabric = fabric
        self.addr = addr
        self.retry_s = retry_s
        self.sessions: Dict[str, Session] = {}
        self.by_addr: Dict[NodeAddr, str] = {}
        self.reports: List[DeliveryReport] = []
        self.expired: List[str] = []
        fabric.bind(addr, self)
        if keepalive_check_s:
            def check():
                self.tick_keepalive(fabric.now_us)
            fabric.every(keepalive_check_s, addr.host, check, "keepalive")

    def _send(self, dst: NodeAddr, p: Packet) -> None:
        _send_packet(self.fabric, self.addr, dst, p)

    def on_frame(self, frame) -> None:
        try:
            p = decode_packet(frame.data)
        except (ProtocolError, struct.error) as exc:
            log.warning("broker: dropping malformed packet from %s: %s", frame.src, exc)
            return
        if p.type == CONNECT:
            self._on_connect(frame.src, p)
            return
        client_id = self.by_addr.get(frame.src)
        session = self.sessions.get(client_id) if client_id else None
        if session is None or not session.online or session.addr != frame.src:
            return
        session.last_activity_us = self.fabric.now_us
        if p.type == PUBLISH:
            self._on_publish(session, p)
        elif p.type == PUBREL:
            session.rx_pending.discard(p.pid)
            self._send(frame.src, Packet(PUBCOMP, p.pid))
        elif p.type in (PUBACK, PUBREC, PUBCOMP):
            session.outbox.on_ack(p.type, p.pid)
        elif p.type == SUBSCRIBE:
            granted = []
            for f, q in p.subscriptions:
                try:
                    parse_filter(f)
                except TopicError:
                    granted.append(0x80)
                    continue
                q = min(q, 2)
                session.subscriptions[f] = max(q, session.subscriptions.get(f, 0))
                granted.append(session.subscriptions[f])
            self._send(frame.src, Packet(SUBACK, p.pid, granted=tuple(granted)))
        elif p.type == PINGREQ:
            self._send(frame.src, Packet(PINGRESP))
        elif p.type == DISCONNECT:
            self._go_offline(session, "disconnect")

    def _on_connect(self, src: NodeAddr, p: Packet) -> None:
        if not p.client_id:
            return
        session = self.sessions.get(p.client_id)
        if session is not None and session.online and session.nonce == p.nonce and session.addr == src:
            # retransmitted CONNECT for the live connection
            self._send(src, Packet(CONNACK, nonce=p.nonce, session_present=not session.clean))
            return
        if session is not None and session.online:
            self.fabric.log("pubsub-takeover", str(self.addr), {"client": p.client_id})
            self._send(session.addr, Packet(DISCONNECT))
            self._go_offline(session, "takeover")
            session = self.sessions.get(p.client_id)
        present = session is not None and not p.clean
        if not present:
            session = Session(p.client_id, p.clean)
            session.outbox = _Outbox(self.fabric, self.addr.host,
                                     lambda pk, s=session: self._send(s.addr, pk), self.retry_s)
            self.sessions[p.client_id] = session
        session.clean = p.clean
        session.keep_alive = p.keep_alive
        session.nonce = p.nonce
        if session.addr is not None:
            self.by_addr.pop(session.addr, None)
        session.addr = src
        session.online = True
        session.last_activity_us = self.fabric.now_us
        self.by_addr[src] = p.client_id
        self.fabric.log("pubsub-connect", str(self.addr),
                        {"client": p.client_id, "clean": p.clean, "present": present})
        self._send(src, Packet(CONNACK, nonce=p.nonce, session_present=present))
        session.outbox.resume()

    def _on_publish(self, session: Session, p: Packet) -> None:
        try:
            msg = Message(p.topic, p.payload, p.qos)
        except (TopicError, ProtocolError):
            log.warning("broker: rejecting publish to %r from %s", p.topic, session.client_id)
            return
        if p.qos == 0:
            self.route(msg, session.client_id)
        elif p.qos == 1:
            self.route(msg, session.client_id)
            self._send(session.addr, Packet(PUBACK, p.pid))
        else:
            if p.pid not in session.rx_pending:
                session.rx_pending.add(p.pid)
                self.route(msg, session.client_id)
            self._send(session.addr, Packet(PUBREC, p.pid))

    def route(self, msg: Message, publisher: str = "$broker") -> DeliveryReport:
        report = DeliveryReport(msg, publisher)
        for client_id, session in self.sessions.items():
            granted = [q for f, q in session.subscriptions.items() if match_filter(f, msg.topic)]
            if not granted:
                continue
            eff = min(msg.qos, max(granted))
            out = Message(msg.topic, msg.payload, eff)
            if session.online:
                session.outbox.push(out)
                report.recipients.append((client_id, eff))
            elif eff > 0 and not session.clean:
                session.outbox.queue.append(out)
                report.queued.append(client_id)
        self.reports.append(report)
        return report

    def publish(self, topic: str, payload: bytes = b"", qos: int = 0) -> DeliveryReport:
        """Broker-originated publish."""
        return self.route(Message(topic, payload, qos))

    def _go_offline(self, session: Session, reason: str) -> None:
        session.online = False
        session.outbox.suspend()
        if session.addr is not None:
            self.by_addr.pop(session.addr, None)
        if session.clean:
            self.sessions.pop(session.client_id, None)
        self.fabric.log("pubsub-offline", str(self.addr),
                        {"client": session.client_id, "reason": reason})

    def tick_keepalive(self, now_us: int) -> List[str]:
        expired = []
        for session in list(self.sessions.values()):
            if not session.online or session.keep_alive <= 0:
                continue
            limit = seconds_to_us(KEEPALIVE_GRACE * session.keep_alive)
            if now_us - session.last_activity_us > limit:
                expired.append(session.client_id)
                self._go_offline(session, "keepalive")
                self.publish(f"cpsb/{session.client_id}/dead", b"", 2)
        self.expired.extend(expired)
        return expired


#
#   Client
#

class PubSubClient:
    """Asynchronous client. Callbacks fire from within the fabric event loop."""

    def __init__(self, fabric: Fabric, addr: NodeAddr, client_id: str, broker: NodeAddr,
                 clean: bool = True, keep_alive: int = DEFAULT_KEEP_ALIVE, retry_s: float = 0.2):
        if not client_id:
            raise ValueError("client_id must be non-empty")
        self.fabric = fabric
        self.addr = addr
        self.client_id = client_id
        self.broker = broker
        self.clean = clean
        self.keep_alive = keep_alive
        self.retry_s = retry_s
        self.connected = False
        self.alive = False
        self.session_present = False
        self.on_message: Optional[Callable[[Message], None]] = None
        self.on_connect: Optional[Callable[["PubSubClient"], None]] = None
        self.received: List[Message] = []
        self.granted: Dict[str, int] = {}
        self._outbox = _Outbox(fabric, addr.host, self._send, retry_s)
        self._control: Dict[Tuple[int, int], Packet] = {}
        self._rx_pending: set = set()
        self._nonces = itertools.count(1)
        self._sub_pids = itertools.count(1)
        self._nonce = 0
        self._epoch = 0
        self._last_sent_us = 0
        fabric.bind(addr, self)

    def _send(self, p: Packet) -> None:
        if not self.alive:
            return
        self._last_sent_us = self.fabric.now_us
        _send_packet(self.fabric, self.addr, self.broker, p)

    # control packets are retransmitted until acknowledged

    def _send_control(self, key: Tuple[int, int], p: Packet) -> None:
        self._control[key] = p
        self._send(p)
        epoch = self._epoch

        def retry():
            if self.alive and epoch == self._epoch and key in self._control:
                self._send(self._control[key])
                self.fabric.call_later(self.retry_s, self.addr.host, retry, "pubsub ctl retry")

        self.fabric.call_later(self.retry_s, self.addr.host, retry, "pubsub ctl retry")

    def connect(self) -> None:
        self.alive = True
        self.connected = False
        self._epoch += 1
        self._nonce = (self._epoch << 16) | (next(self._nonces) & 0xFFFF)
        self._control.clear()
        self._send_control((CONNACK, 0), Packet(CONNECT, client_id=self.client_id, clean=self.clean,
                                                keep_alive=self.keep_alive, nonce=self._nonce))
        if self.keep_alive > 0:
            epoch = self._epoch
            half = self.keep_alive / 2

            def ping():
                if not self.alive or epoch != self._epoch:
                    return False
                if self.connected and self.fabric.now_us - self._last_sent_us >= seconds_to_us(half):
                    self._send(Packet(PINGREQ))
                return None

            self.fabric.every(half, self.addr.host, ping, "pubsub ping")

    def subscribe(self, topic_filter: str, qos: int = 0) -> int:
        parse_filter(topic_filter)
        if qos not in (0, 1, 2):
            raise ProtocolError(f"invalid qos {qos}")
        pid = next(self._sub_pids) & 0xFFFF or 1
        self._send_control((SUBACK, pid), Packet(SUBSCRIBE, pid, subscriptions=((topic_filter, qos),)))
        return pid

    def publish(self, topic: str, payload: bytes = b"", qos: int = 0) -> None:
        self._outbox.push(Message(topic, bytes(payload), qos))

    def disconnect(self) -> None:
        self._send(Packet(DISCONNECT))
        self._drop()

    def crash(self) -> None:
        """Go silent without telling the broker."""
        self._drop()

    def _drop(self) -> None:
        self.alive = False
        self.connected = False
        self._epoch += 1
        self._outbox.suspend(drop_qos0=True)

    @property
    def pending(self) -> int:
        return len(self._outbox.queue) + (self._outbox.inflight is not None)

    def on_frame(self, frame) -> None:
        if not self.alive:
            return
        try:
            p = decode_packet(frame.data)
        except (ProtocolError, struct.error):
            return
        if p.type == CONNACK:
            if p.nonce != self._nonce or self.connected:
                return
            self._control.pop((CONNACK, 0), None)
            self.connected = True
            self.session_present = p.session_present
            self._outbox.resume()
            if self.on_connect:
                self.on_connect(self)
        elif p.type == SUBACK:
            sent = self._control.pop((SUBACK, p.pid), None)
            if sent is not None:
                for (f, _), g in zip(sent.subscriptions, p.granted):
                    self.granted[f] = g
        elif p.type == PUBLISH:
            self._on_publish(p)
        elif p.type == PUBREL:
            self._rx_pending.discard(p.pid)
            self._send(Packet(PUBCOMP, p.pid))
        elif p.type in (PUBACK, PUBREC, PUBCOMP):
            self._outbox.on_ack(p.type, p.pid)
        elif p.type == DISCONNECT:
            self._drop()

    def _on_publish(self, p: Packet) -> None:
        msg = Message(p.topic, p.payload, p.qos)
        if p.qos == 2:
            if p.pid not in self._rx_pending:
                self._rx_pending.add(p.pid)
                self._deliver(msg)
            self._send(Packet(PUBREC, p.pid))
            return
        self._deliver(msg)
        if p.qos == 1:
            self._send(Packet(PUBACK, p.pid))

    def _deliver(self, msg: Message) -> None:
        self.received.append(msg)
        if self.on_message:
            self.on_message(msg)
