"""A tiny broker on the virtual network: wildcards, QoS 2 under loss,
persistent sessions and the keep-alive dead notice."""

# %%
from cpsbot.netfabric import Fabric, NodeAddr
from cpsbot.pubsub import Broker, PubSubClient, match_filter

for f, t in [("sub1/+/hrs/+/response", "sub1/rtu1/hrs/hr100/response"), ("sub1/*", "sub1/rtu1/cos/co0/request"),
             ("cpsb/+/dead", "cpsb/bot1/sw")]:
    print(f"{f:24s} {t:32s} {match_filter(f, t)}")

# %% Star network with 10% loss on every link
fab = Fabric(seed=3)
fab.add_host("net", "broker")
fab.add_host("net", "hub")
fab.add_link("net/broker", "net/hub", 1.0, 0.1)
for name in ("pub", "sub"):
    fab.add_link(fab.add_host("net", name), "net/hub", 1.0, 0.1)
broker = Broker(fab, NodeAddr("net", "broker", 1883), keepalive_check_s=0.05)
pub = PubSubClient(fab, NodeAddr("net", "pub", 1000), "pub", broker.addr, keep_alive=0)
sub = PubSubClient(fab, NodeAddr("net", "sub", 1000), "sub", broker.addr, clean=False, keep_alive=0)
pub.connect()
sub.connect()
sub.subscribe("data/*", 2)
sub.subscribe("cpsb/+/dead", 2)
fab.run_until(2.0)
for i in range(200):
    pub.publish(f"data/{i % 3}", str(i).encode(), 2)
fab.run_until(300.0)
got = [int(m.payload) for m in sub.received]
print("QoS 2:", len(got), "delivered, in order:", got == list(range(200)),
      "| dropped datagrams:", sum(r.direction == "drop" for r in fab.trace))

# %% Offline messages wait in the persistent session.
# QoS 1 is at least once: on these lossy links a retransmitted publish may arrive twice.
sub.disconnect()
fab.run_until(fab.now + 0.5)
for i in range(3):
    pub.publish("data/late", f"queued {i}".encode(), 1)
fab.run_until(fab.now + 1.0)
print("queued for sub:", [m.payload for m in broker.sessions["sub"].offline_queue])
sub.received.clear()
sub.connect()
fab.run_until(fab.now + 2.0)
print("after reconnect:", [m.payload for m in sub.received])

# %% A silent client expires after 1.5 x its keep-alive
bot = PubSubClient(fab, NodeAddr("net", "pub", 2000), "bot9", broker.addr, keep_alive=4)
bot.connect()
fab.run_until(fab.now + 1.0)
bot.crash()
fab.run_until(fab.now + 10.0)
print("dead notices:", [m.topic for m in sub.received if m.topic.endswith("/dead")])
