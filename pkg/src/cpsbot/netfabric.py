"""Deterministic virtual network: hosts, latency links, stream and datagram
channels, interposition taps and a discrete-event virtual clock.

Time is kept as integer microseconds so that timing metrics computed from
the trace are exact. Events firing at the same instant are ordered by
(node id, sequence number).
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

log = logging.getLogger(__name__)

US_PER_S = 1_000_000
US_PER_MS = 1_000

BRIDGE = "bridge"
ISOLATE = "isolate"

TRACE_FIELDS = ("virtual_time_ms", "src", "dst", "channel", "direction",
                "byte_len", "kind", "payload_digest")


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


class FabricError(Exception):
    pass


class NoRouteError(FabricError):
    pass


class TapError(FabricError):
    pass


@dataclass(frozen=True, order=True)
class NodeAddr:
    network_id: str
    host_id: str
    endpoint: int = 0

    @property
    def host(self) -> str:
        return f"{self.network_id}/{self.host_id}"

    def __str__(self) -> str:
        return f"{self.network_id}/{self.host_id}:{self.endpoint}"

    @classmethod
    def parse(cls, text: str) -> "NodeAddr":
        host, _, endpoint = text.rpartition(":")
        network_id, _, host_id = host.partition("/")
        return cls(network_id, host_id, int(endpoint))


@dataclass
class Tap:
    link: "Link"
    mode: str
    owner: str
    cut: str  # host key of the endpoint the owner can cut off


@dataclass
class Link:
    a: str
    b: str
    latency_ms: float = 1.0
    loss_rate: float = 0.0
    tap: Optional[Tap] = None
    attached: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.latency_ms < 0:
            raise FabricError(f"negative latency on {self.a}<->{self.b}")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise FabricError(f"loss rate outside [0, 1] on {self.a}<->{self.b}")

    @property
    def latency_us(self) -> int:
        return ms_to_us(self.latency_ms)

    def other(self, host: str) -> str:
        return self.b if host == self.a else self.a


@dataclass
class TraceRecord:
    virtual_time_ms: float
    src: str
    dst: str
    channel: str
    direction: str
    byte_len: int
    kind: str
    payload_digest: str
    meta: Optional[dict] = None

    def to_json(self) -> str:
        obj = {k: getattr(self, k) for k in TRACE_FIELDS}
        if self.meta:
            obj["meta"] = self.meta
        return json.dumps(obj, separators=(",", ":"), sort_keys=False)

    @classmethod
    def from_dict(cls, obj: dict) -> "TraceRecord":
        missing = [k for k in TRACE_FIELDS if k not in obj]
        if missing:
            raise ValueError(f"missing fields: {', '.join(missing)}")
        return cls(float(obj["virtual_time_ms"]), str(obj["src"]), str(obj["dst"]),
                   str(obj["channel"]), str(obj["direction"]), int(obj["byte_len"]),
                   str(obj["kind"]), str(obj["payload_digest"]), obj.get("meta"))


def payload_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16] if data else ""


class Trace:
    """Append-only list of trace records, serialized as JSON lines."""

    def __init__(self, records: Optional[List[TraceRecord]] = None):
        self.records: List[TraceRecord] = list(records or [])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def add(self, time_us: int, src: str, dst: str, channel: str, direction: str,
            kind: str, data: bytes = b"", meta: Optional[dict] = None,
            byte_len: Optional[int] = None) -> TraceRecord:
        rec = TraceRecord(round(time_us / US_PER_MS, 3), src, dst, channel, direction,
                          len(data) if byte_len is None else byte_len, kind,
                          payload_digest(data), meta)
        self.records.append(rec)
        return rec

    def lines(self) -> Iterable[str]:
        for rec in self.records:
            yield rec.to_json()

    def dumps(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def read(cls, path) -> "Trace":
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(TraceRecord.from_dict(json.loads(line)))
                except (ValueError, TypeError, KeyError) as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from exc
        return cls(records)


@dataclass
class Channel:
    """Ordered, reliable stream. A channel opened towards several peers is
    multiplexed: each send names its destination."""
    id: str
    opener: NodeAddr
    peers: Tuple[NodeAddr, ...]
    open: bool = True

    @property
    def multiplexed(self) -> bool:
        return len(self.peers) > 1


@dataclass
class Frame:
    channel: Optional[Channel]
    src: NodeAddr
    dst: NodeAddr
    data: bytes
    sent_us: int
    kind: str
    actor: str
    meta: Optional[dict] = None


@dataclass(order=True)
class Event:
    time_us: int
    node: str
    seq: int
    label: str = field(compare=False)
    fn: Callable = field(compare=False, repr=False)


class Fabric:
    def __init__(self, seed: int = 0):
        self.graph = nx.Graph()
        self.links: Dict[frozenset, Link] = {}
        self.endpoints: Dict[NodeAddr, Any] = {}
        self.channels: Dict[str, Channel] = {}
        self.trace = Trace()
        self.now_us = 0
        self._queue: List[Event] = []
        self._seq = itertools.count()
        self._chan_ids = itertools.count(1)
        self._paths: Dict[Tuple[str, str], List[str]] = {}
        self._loss_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10557]))

    @property
    def now(self) -> float:
        return self.now_us / US_PER_S

    # topology

    def add_host(self, network_id: str, host_id: str) -> str:
        key = f"{network_id}/{host_id}"
        self.graph.add_node(key, network=network_id)
        return key

    def add_link(self, a: str, b: str, latency_ms: float = 1.0, loss_rate: float = 0.0) -> Link:
        for host in (a, b):
            if host not in self.graph:
                raise FabricError(f"unknown host {host}")
        link = Link(a, b, latency_ms, loss_rate)
        self.links[frozenset((a, b))] = link
        self.graph.add_edge(a, b, weight=link.latency_us)
        self._paths.clear()
        return link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise FabricError(f"no link {a}<->{b}") from None

    def bind(self, addr: NodeAddr, handler) -> None:
        if addr.host not in self.graph:
            raise FabricError(f"unknown host {addr.host}")
        self.endpoints[addr] = handler

    def path(self, a: str, b: str) -> List[str]:
        key = (a, b)
        if key not in self._paths:
            try:
                self._paths[key] = nx.shortest_path(self.graph, a, b, weight="weight")
            except (nx.NetworkXNoPath, nx.NodeNotFound):
                raise NoRouteError(f"no route {a} -> {b}") from None
        return self._paths[key]

    def latency_us(self, a: str, b: str) -> int:
        hops = self.path(a, b)
        return sum(self.link(x, y).latency_us for x, y in zip(hops, hops[1:]))

    def _path_links(self, a: str, b: str) -> List[Tuple[str, str, Link]]:
        hops = self.path(a, b)
        return [(x, y, self.link(x, y)) for x, y in zip(hops, hops[1:])]

    # taps

    def attach(self, owner: str, link: Link, handler) -> None:
        """Place ``owner`` at ``link``. The owner must be one of its endpoints;
        the other endpoint becomes the one it can cut off."""
        if owner not in (link.a, link.b):
            raise TapError(f"{owner} is not an endpoint of {link.a}<->{link.b}")
        link.attached[owner] = handler

    def set_tap(self, link: Link, mode: str, owner: str) -> None:
        if mode not in (BRIDGE, ISOLATE):
            raise TapError(f"unknown tap mode {mode!r}")
        if owner not in link.attached:
            raise TapError(f"{owner} is not attached to {link.a}<->{link.b}")
        if link.tap is None:
            link.tap = Tap(link, mode, owner, link.other(owner))
            if mode == ISOLATE:
                self._reset_crossing(link)
            return
        if link.tap.owner != owner:
            raise TapError(f"{link.a}<->{link.b} is already tapped by {link.tap.owner}")
        previous, link.tap.mode = link.tap.mode, mode
        if previous == BRIDGE and mode == ISOLATE:
            self._reset_crossing(link)

    def tap_on(self, link: Link) -> Optional[Tap]:
        return link.tap

    def _crossing_tap(self, actor: str, dst_host: str) -> Optional[Tuple[Tap, int]]:
        """First tap crossed on the way from ``actor`` to ``dst_host``, with the
        delay until the frame reaches the tap point. Traffic to or from the
        tap owner itself is never intercepted."""
        elapsed = 0
        for x, y, link in self._path_links(actor, dst_host):
            tap = link.tap
            if tap is not None and tap.owner not in (actor, dst_host):
                if y == tap.owner:
                    return tap, elapsed + link.latency_us
                return tap, elapsed
            elapsed += link.latency_us
        return None

    def _channel_crosses(self, channel: Channel, link: Link) -> bool:
        hosts = {p.host for p in channel.peers} | {channel.opener.host}
        if link.tap.cut not in hosts:
            return False
        for peer in channel.peers:
            hops = self.path(channel.opener.host, peer.host)
            for x, y in zip(hops, hops[1:]):
                if frozenset((x, y)) == frozenset((link.a, link.b)):
                    return True
        return False

    def _reset_crossing(self, link: Link) -> None:
        for channel in list(self.channels.values()):
            if channel.open and self._channel_crosses(channel, link):
                self.reset(channel, at=link.tap.owner, reason="isolate")

    def reset(self, channel: Channel, at: str, reason: str = "") -> None:
        """Abort ``channel``; each endpoint learns about it after the delay
        from ``at`` to itself. Frames still in flight are discarded."""
        if not channel.open:
            return
        channel.open = False
        self.channels.pop(channel.id, None)
        peer = next((p for p in channel.peers if self._crosses_host(channel, p, at)), channel.peers[0])
        self.trace.add(self.now_us, str(channel.opener), str(peer), channel.id, "reset", "reset",
                       meta={"reason": reason, "at": at})
        for addr in (channel.opener,) + channel.peers:
            handler = self.endpoints.get(addr)
            if handler is None or not hasattr(handler, "on_reset"):
                continue
            delay = self.latency_us(at, addr.host)
            self.schedule(self.now_us + delay, at, lambda h=handler: h.on_reset(channel),
                          f"reset {channel.id}")

    def _crosses_host(self, channel: Channel, peer: NodeAddr, at: str) -> bool:
        return at in self.path(channel.opener.host, peer.host)

    # streams

    def open_stream(self, src: NodeAddr, dst: Union[NodeAddr, Sequence[NodeAddr]]) -> Channel:
        peers = (dst,) if isinstance(dst, NodeAddr) else tuple(dst)
        if not peers:
            raise FabricError("stream needs at least one peer")
        for peer in peers:
            self.path(src.host, peer.host)
        channel = Channel(f"s{next(self._chan_ids)}", src, peers)
        self.channels[channel.id] = channel
        for peer in peers:
            crossing = self._crossing_tap(src.host, peer.host)
            if crossing and crossing[0].mode == ISOLATE:
                tap = crossing[0]
                handler = tap.link.attached[tap.owner]
                accepts = getattr(handler, "accepts", None)
                if accepts is None or not accepts(peer):
                    self.reset(channel, at=tap.owner, reason="declined")
                    break
        return channel

    def stream_send(self, channel: Channel, src: NodeAddr, dst: NodeAddr, data: bytes,
                    kind: str = "data", meta: Optional[dict] = None,
                    actor: Optional[str] = None) -> bool:
        """Send ``data`` on ``channel``. ``actor`` is the host physically
        emitting the frame; it differs from ``src.host`` when an identity is
        being spoofed."""
        if not channel.open:
            return False
        actor = actor or src.host
        frame = Frame(channel, src, dst, bytes(data), self.now_us, kind, actor, meta)
        self.trace.add(self.now_us, str(src), str(dst), channel.id, "tx", kind, frame.data, meta)

        crossing = self._crossing_tap(actor, dst.host)
        if crossing is not None:
            tap, delay = crossing
            handler = tap.link.attached[tap.owner]
            if tap.mode == ISOLATE:
                self.schedule(self.now_us + delay, actor,
                              lambda: self._divert(frame, tap, handler), f"divert {channel.id}")
                return True
            self.schedule(self.now_us + delay, actor,
                          lambda: self._observe(frame, tap, handler), f"tap {channel.id}")

        self.schedule(self.now_us + self.latency_us(actor, dst.host), actor,
                      lambda: self._deliver(frame), f"stream {channel.id}")
        return True

    def _observe(self, frame: Frame, tap: Tap, handler) -> None:
        self.trace.add(self.now_us, str(frame.src), str(frame.dst), frame.channel.id, "tap",
                       frame.kind, frame.data, frame.meta)
        on_observe = getattr(handler, "on_observe", None)
        if on_observe is not None:
            on_observe(frame)

    def _divert(self, frame: Frame, tap: Tap, handler) -> None:
        if not frame.channel.open:
            return
        self.trace.add(self.now_us, str(frame.src), str(frame.dst), frame.channel.id, "divert",
                       frame.kind, frame.data, frame.meta)
        on_intercept = getattr(handler, "on_intercept", None)
        if on_intercept is not None and frame.dst.host == tap.cut:
            on_intercept(frame)

    def _deliver(self, frame: Frame) -> None:
        if frame.channel is not None and not frame.channel.open:
            return
        self.trace.add(self.now_us, str(frame.src), str(frame.dst),
                       frame.channel.id if frame.channel else "dgram", "rx",
                       frame.kind, frame.data, frame.meta)
        handler = self.endpoints.get(frame.dst)
        if handler is not None:
            handler.on_frame(frame)

    # datagrams

    def path_loss(self, a: str, b: str) -> float:
        keep = 1.0
        for _, _, link in self._path_links(a, b):
            keep *= 1.0 - link.loss_rate
        return 1.0 - keep

    def send_datagram(self, src: NodeAddr, dst: NodeAddr, data: bytes, kind: str = "dgram",
                      meta: Optional[dict] = None) -> bool:
        frame = Frame(None, src, dst, bytes(data), self.now_us, kind, src.host, meta)
        loss = self.path_loss(src.host, dst.host)
        if loss > 0.0 and self._loss_rng.random() < loss:
            self.trace.add(self.now_us, str(src), str(dst), "dgram", "drop", kind, frame.data, meta)
            return False
        self.trace.add(self.now_us, str(src), str(dst), "dgram", "tx", kind, frame.data, meta)
        self.schedule(self.now_us + self.latency_us(src.host, dst.host), src.host,
                      lambda: self._deliver(frame), "dgram")
        return True

    # clock

    def schedule(self, at_us: int, node: str, fn: Callable, label: str = "") -> Event:
        if at_us < self.now_us:
            raise FabricError(f"cannot schedule in the past ({at_us} < {self.now_us})")
        event = Event(int(at_us), node, next(self._seq), label, fn)
        heapq.heappush(self._queue, event)
        return event

    def call_later(self, delay_s: float, node: str, fn: Callable, label: str = "") -> Event:
        return self.schedule(self.now_us + seconds_to_us(delay_s), node, fn, label)

    def call_at(self, t_s: float, node: str, fn: Callable, label: str = "") -> Event:
        return self.schedule(seconds_to_us(t_s), node, fn, label)

    def every(self, period_s: float, node: str, fn: Callable, label: str = "",
              start_s: Optional[float] = None, until_s: Optional[float] = None) -> None:
        """Run ``fn`` periodically; returning False from ``fn`` stops it."""
        period_us = seconds_to_us(period_s)
        if period_us <= 0:
            raise FabricError("period must be positive")
        first = self.now_us + period_us if start_s is None else seconds_to_us(start_s)
        stop = None if until_s is None else seconds_to_us(until_s)

        def tick(at=first):
            if fn() is False:
                return
            nxt = at + period_us
            if stop is None or nxt <= stop:
                self.schedule(nxt, node, lambda: tick(nxt), label)

        if stop is None or first <= stop:
            self.schedule(first, node, tick, label)

    def advance_clock(self, dt_s: float) -> List[Event]:
        if dt_s <= 0:
            raise FabricError("dt must be positive")
        return self.run_until_us(self.now_us + seconds_to_us(dt_s))

    def run_until(self, t_s: float) -> List[Event]:
        return self.run_until_us(seconds_to_us(t_s))

    def run_until_us(self, end_us: int) -> List[Event]:
        fired = []
        while self._queue and self._queue[0].time_us <= end_us:
            event = heapq.heappop(self._queue)
            self.now_us = event.time_us
            event.fn()
            fired.append(event)
        self.now_us = max(self.now_us, end_us)
        return fired

    def log(self, kind: str, src: str, meta: Optional[dict] = None, dst: str = "-",
            data: bytes = b"") -> TraceRecord:
        return self.trace.add(self.now_us, src, dst, "-", "log", kind, data, meta)
