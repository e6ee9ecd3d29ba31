import itertools
import re

import pytest
from hypothesis import given, settings, strategies as st

from cpsbot.netfabric import Fabric, NodeAddr
from cpsbot.pubsub import (
    Broker, Message, Packet, ProtocolError, PubSubClient, TopicError, decode_packet, encode_packet,
    match_filter, parse_filter, CONNECT, PUBLISH, SUBSCRIBE, SUBACK,
)


def regex_oracle(topic_filter: str) -> re.Pattern:
    parts = []
    for level in topic_filter.split("/"):
        if level == "+":
            parts.append("[^/]+")
        elif level == "*":
            parts.append("[^/]+(?:/[^/]+)*")
        else:
            parts.append(re.escape(level))
    return re.compile("/".join(parts) + r"\Z")


def all_strings(alphabet, max_depth):
    for depth in range(1, max_depth + 1):
        for combo in itertools.product(alphabet, repeat=depth):
            yield "/".join(combo)


def test_wildcards_exhaustive_against_regex_oracle():
    topics = list(all_strings("abc", 4))
    filters = [f for f in all_strings(["a", "b", "+", "*"], 4) if "*" not in f.split("/")[:-1]]
    mismatches = 0
    for f in filters:
        oracle = regex_oracle(f)
        for t in topics:
            mismatches += match_filter(f, t) != bool(oracle.match(t))
    assert len(filters) > 100
    assert mismatches == 0


def test_wildcard_examples():
    assert match_filter("sub1/+/hrs/+/response", "sub1/rtu1/hrs/hr100/response")
    assert not match_filter("sub1/+/hrs", "sub1/rtu1/hrs/hr100")
    assert match_filter("sub1/*", "sub1/rtu1/hrs/hr100/response")
    assert match_filter("cpsb/+/dead", "cpsb/bot2/dead")


@pytest.mark.parametrize("bad", ["a/*/b", "a/b+", "a//b", "*a"])
def test_bad_filters_rejected(bad):
    with pytest.raises(TopicError):
        parse_filter(bad)


def test_publish_to_wildcard_topic_rejected():
    with pytest.raises(TopicError):
        Message("sub1/+/x", b"", 0)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([CONNECT, PUBLISH, SUBSCRIBE, SUBACK]), st.integers(0, 0xFFFF),
       st.integers(0, 2), st.binary(max_size=40))
def test_packet_round_trip(ptype, pid, qos, payload):
    p = Packet(ptype, pid, qos if ptype == PUBLISH else 0, topic="a/b" if ptype == PUBLISH else "",
               payload=payload if ptype == PUBLISH else b"", client_id="c1" if ptype == CONNECT else "",
               subscriptions=(("a/+", qos),) if ptype == SUBSCRIBE else (),
               granted=(qos, 0x80) if ptype == SUBACK else ())
    q = decode_packet(encode_packet(p))
    assert q.type == p.type and q.pid == p.pid
    if ptype == PUBLISH:
        assert (q.topic, q.payload, q.qos) == ("a/b", payload, qos)
    if ptype == SUBSCRIBE:
        assert q.subscriptions == p.subscriptions


def test_decode_garbage():
    with pytest.raises(ProtocolError):
        decode_packet(b"\x01")
    with pytest.raises(ProtocolError):
        decode_packet(b"\x05\x00\x00\x00")


#
#   Broker / client over the fabric
#

def star(n_clients, loss=0.0, seed=0, keepalive_check=0.5):
    fab = Fabric(seed)
    fab.add_host("net", "broker")
    fab.add_host("net", "hub")
    fab.add_link("net/broker", "net/hub", 1.0, loss)
    addrs = []
    for i in range(n_clients):
        host = fab.add_host("net", f"c{i}")
        fab.add_link(host, "net/hub", 1.0, loss)
        addrs.append(NodeAddr("net", f"c{i}", 1000))
    broker = Broker(fab, NodeAddr("net", "broker", 1883), keepalive_check_s=keepalive_check)
    return fab, broker, addrs


def client(fab, broker, addr, cid, **kw):
    c = PubSubClient(fab, addr, cid, broker.addr, **kw)
    c.connect()
    return c


def test_effective_qos_is_minimum():
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub")
    sub = client(fab, broker, b, "sub")
    sub.subscribe("t/x", 1)
    fab.run_until(0.1)
    pub.publish("t/x", b"1", 2)
    pub.publish("t/x", b"2", 0)
    fab.run_until(0.5)
    assert [(m.payload, m.qos) for m in sub.received] == [(b"1", 1), (b"2", 0)]
    assert broker.reports[0].recipients == [("sub", 1)]


def test_overlapping_subscriptions_deliver_once_at_max_qos():
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub")
    sub = client(fab, broker, b, "sub")
    sub.subscribe("t/+", 0)
    sub.subscribe("t/*", 2)
    fab.run_until(0.1)
    pub.publish("t/x", b"v", 2)
    fab.run_until(0.5)
    assert [(m.payload, m.qos) for m in sub.received] == [(b"v", 2)]


def test_zero_recipients_is_not_an_error():
    fab, broker, (a,) = star(1)
    pub = client(fab, broker, a, "pub")
    fab.run_until(0.1)
    pub.publish("nobody/listens", b"", 1)
    fab.run_until(0.5)
    assert broker.reports[-1].recipients == []
    assert pub.pending == 0


def test_qos2_exactly_once_under_loss():
    fab, broker, addrs = star(4, loss=0.10, seed=7)
    pub = client(fab, broker, addrs[0], "pub", keep_alive=0)
    subs = [client(fab, broker, addrs[i], f"s{i}", keep_alive=0) for i in (1, 2, 3)]
    for s in subs:
        s.subscribe("data/*", 2)
    fab.run_until(2.0)
    assert all(s.connected for s in subs + [pub])
    for i in range(1000):
        pub.publish(f"data/{i % 7}", str(i).encode(), 2)
    fab.run_until(2000.0)
    drops = sum(r.direction == "drop" for r in fab.trace)
    assert drops > 100
    expected = [str(i).encode() for i in range(1000)]
    for s in subs:
        assert [m.payload for m in s.received] == expected


def test_qos1_at_least_once_when_puback_lost():
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub", keep_alive=0)
    sub = client(fab, broker, b, "sub", keep_alive=0)
    sub.subscribe("t", 1)
    fab.run_until(0.1)
    # drop the first PUBACK going back to the publisher
    original = fab.send_datagram
    dropped = []

    def lossy(src, dst, data, kind="dgram", meta=None):
        if meta and meta.get("type") == "PUBACK" and dst == a and not dropped:
            dropped.append(1)
            return False
        return original(src, dst, data, kind, meta)

    fab.send_datagram = lossy
    pub.publish("t", b"once", 1)
    fab.run_until(2.0)
    assert dropped
    assert len(sub.received) >= 1
    assert all(m.payload == b"once" for m in sub.received)


def test_persistent_session_receives_queued_messages_in_order():
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub")
    sub = client(fab, broker, b, "sub", clean=False)
    sub.subscribe("q", 1)
    fab.run_until(0.1)
    sub.disconnect()
    fab.run_until(0.2)
    for i in range(3):
        pub.publish("q", bytes([i]), 1)
    pub.publish("q", b"qos0 is not queued", 0)
    fab.run_until(0.5)
    assert [m.payload for m in broker.sessions["sub"].offline_queue] == [b"\x00", b"\x01", b"\x02"]
    sub.connect()
    fab.run_until(1.0)
    assert sub.session_present
    assert [m.payload for m in sub.received] == [b"\x00", b"\x01", b"\x02"]


def test_clean_session_drops_subscriptions():
    fab, broker, (a, b) = star(2)
    pub = client(fab, broker, a, "pub")
    sub = client(fab, broker, b, "sub", clean=True)
    sub.subscribe("q", 1)
    fab.run_until(0.1)
    sub.disconnect()
    fab.run_until(0.2)
    pub.publish("q", b"x", 1)
    sub.connect()
    fab.run_until(1.0)
    assert sub.received == []


def run_keepalive(keep_alive, silent_for):
    fab, broker, (a, b) = star(2, keepalive_check=0.05)
    watcher = client(fab, broker, a, "watcher", keep_alive=0)
    watcher.subscribe("cpsb/+/dead", 2)
    bot = client(fab, broker, b, "bot7", keep_alive=keep_alive)
    fab.run_until(0.5)
    bot.crash()
    t0 = fab.now
    fab.run_until(t0 + silent_for)
    return broker, watcher


def test_keepalive_expiry_publishes_one_dead_notice():
    broker, watcher = run_keepalive(10, 10 * 1.5 + 1.0)
    dead = [m for m in watcher.received if m.topic == "cpsb/bot7/dead"]
    assert len(dead) == 1 and dead[0].qos == 2 and dead[0].payload == b""
    assert broker.expired == ["bot7"]


def test_keepalive_not_expired_before_grace():
    broker, watcher = run_keepalive(10, 10 * 1.4)
    assert broker.expired == []
    assert watcher.received == []


def test_keepalive_zero_never_expires():
    broker, _ = run_keepalive(0, 1000.0)
    assert broker.expired == []


def test_default_keepalive_is_60():
    fab, broker, (a,) = star(1)
    c = PubSubClient(fab, a, "c", broker.addr)
    assert c.keep_alive == 60


def test_pings_keep_idle_client_alive():
    fab, broker, (a,) = star(1, keepalive_check=0.05)
    client(fab, broker, a, "idle", keep_alive=2)
    fab.run_until(30.0)
    assert broker.expired == []


def test_session_takeover():
    fab, broker, (a, b) = star(2)
    first = client(fab, broker, a, "dup")
    fab.run_until(0.1)
    second = client(fab, broker, b, "dup")
    fab.run_until(0.2)
    assert broker.sessions["dup"].addr == b
    assert not first.connected and second.connected
    assert any(r.kind == "pubsub-takeover" for r in fab.trace)


def test_client_requires_id():
    fab, broker, (a,) = star(1)
    with pytest.raises(ValueError):
        PubSubClient(fab, a, "", broker.addr)
