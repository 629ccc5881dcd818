import json
import random

import pytest

from ctxpeers.net.codec import Message, MessageType
from ctxpeers.net.sim import SimConfig
from ctxpeers.node import ConfigError, ContextPeer, NodeConfig, build_wrapper
from ctxpeers.rdql import ResultSet, evaluate_local, parse_query
from ctxpeers.scenario import SimNetwork
from ctxpeers.semantic import ClusterMapping
from fuzz import random_message
from workload import BASE, PREDICATES, mapping, random_triples

EX = "http://ctx.example.org/"


def probe(net, name="probe"):
    inbox = []
    net.sim.register(name, inbox.append)
    return inbox


def send(net, kind, payload, dst, src="probe", ttl=64, msg_id=1):
    net.sim.transmit(Message(kind, src, dst, msg_id, ttl, payload))
    net.sim.run_for(100)


def test_config_defaults_and_round_trip():
    cfg = NodeConfig(address="h:1")
    assert NodeConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.retry_backoff == (1000, 2000, 4000) and cfg.subquery_timeout == 5000


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="unknown config keys"):
        NodeConfig.from_dict({"address": "h:1", "colour": "red"})
    with pytest.raises(ConfigError):
        NodeConfig(address="h:1", stabilize_period=0)
    with pytest.raises(ConfigError):
        NodeConfig(address="h:1", node_id=2 ** 64)


def test_config_from_env(tmp_path, monkeypatch):
    (tmp_path / "map.txt").write_text(f"<{EX}t> Environment\n")
    path = tmp_path / "node.json"
    path.write_text(json.dumps({"address": "127.0.0.1:9", "mapping": "map.txt"}))
    monkeypatch.setenv("CTXPEER_CONFIG", str(path))
    cfg = NodeConfig.load()
    assert cfg.mapping == str(tmp_path / "map.txt")
    assert cfg.load_mapping().cluster_of(EX + "t") == "Environment"
    monkeypatch.delenv("CTXPEER_CONFIG")
    with pytest.raises(ConfigError):
        NodeConfig.load()


def test_unknown_wrapper_source():
    with pytest.raises(ConfigError):
        build_wrapper({"source": "thermometer"})


def test_standalone_node_answers_locally():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    data = random_triples(random.Random(1), 50)
    net.join("solo", data)
    peer = net.peer("solo")
    assert peer.ring.alone()
    text = f"SELECT ?s ?o WHERE (?s, <{PREDICATES['Shop'][0]}>, ?o)"
    assert net.query("solo", text) == evaluate_local(parse_query(text), peer.store)


def test_ping_pong():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    net.join("a")
    inbox = probe(net)
    send(net, MessageType.PING, {}, "a", msg_id=7)
    assert [(m.type, m.payload["re"]) for m in inbox] == [(MessageType.PONG, 7)]


def test_subquery_returns_matching_binding():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    p = PREDICATES["Location"][0]
    net.join("a", [f"<{BASE}/bob> <{p}> <{BASE}/kitchen> .", f"<{BASE}/x> <{PREDICATES['Shop'][0]}> <{BASE}/y> ."])
    inbox = probe(net)
    me = net.peer("a").ring.me
    send(net, MessageType.SUBQUERY, {
        "corr": "probe#1", "origin": "probe", "head": me.to_json(), "mode": "arc",
        "label": "Location", "prefix": me.id >> 48,
        "body": {"patterns": [["?s", f"<{p}>", "?o"]]}}, "a")
    reply = [m for m in inbox if m.type == MessageType.SUBQUERY_RESULT]
    assert len(reply) == 1
    rs = ResultSet.from_json(reply[0].payload["body"]["results"][0])
    assert len(rs) == 1


def test_ttl_zero_dropped():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    net.join("a")
    inbox = probe(net)
    send(net, MessageType.PING, {}, "a", ttl=0)
    assert inbox == [] and net.peer("a").counters["ttl_expired"] == 1


def test_every_kind_has_a_handler():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    net.join("a")
    assert set(net.peer("a").handlers) == set(MessageType)


def test_fuzzed_payloads_counted_not_fatal():
    net = SimNetwork(SimConfig(seed=2, keep_log=False), mapping())
    net.join("a", random_triples(random.Random(2), 20))
    net.join("b", random_triples(random.Random(3), 20))
    net.settle()
    peer = net.peer("a")
    rng = random.Random(4)
    for i in range(2000):
        kind = list(MessageType)[i % len(MessageType)]
        m = random_message(rng, kind, dst="a")
        m.ttl = 5
        if rng.random() < 0.5:
            m.payload.pop(next(iter(m.payload), None), None)
        peer.dispatch(m)
        net.sim.run_for(2)
    net.rounds(10)
    assert peer.running and peer.counters["malformed"] > 0
    assert net.ring_converged()


def test_put_remove_and_stats():
    net = SimNetwork(SimConfig(seed=1, keep_log=False), mapping())
    net.join("a")
    t = f"<{BASE}/x> <{PREDICATES['Shop'][0]}> <{BASE}/y> ."
    assert net.peer("a").put(t) and not net.peer("a").put(t)
    stats = net.peer("a").stats()
    assert stats["triples"] == 1 and stats["clusters"] == {"Shop": 1}
    assert net.peer("a").remove(t)


def test_wrapper_from_config_feeds_store():
    m = ClusterMapping.parse([f"functional <{EX}temperature> Environment"])
    net = SimNetwork(SimConfig(seed=1, keep_log=False), m)
    net.join("sensor", wrappers=[{"source": "randomwalk", "seed": 1, "entity": EX + "k",
                                  "attribute": EX + "temperature", "start": 20, "step": 1,
                                  "min": 10, "max": 30, "period": 200}])
    net.sim.run_for(2000)
    store = net.peer("sensor").store
    assert len(store) == 1


def test_graceful_leave_hands_off_registry():
    net = SimNetwork(SimConfig(seed=5, keep_log=False), mapping())
    env = PREDICATES["Environment"][0]
    loc = PREDICATES["Location"][0]
    net.join("e1", [f"<{BASE}/r> <{env}> <{BASE}/v> ."])
    net.join("l1", [f"<{BASE}/a> <{loc}> <{BASE}/r> .", f"<{BASE}/b> <{loc}> <{BASE}/r> .",
                    f"<{BASE}/q> <{env}> <{BASE}/w> ."])
    net.join("l2", [f"<{BASE}/c> <{loc}> <{BASE}/r> ."])
    net.settle()
    net.rounds(3)
    holders = [p for p in net.live() if p.semantic.registry.members("Environment", net.sim.now())]
    assert holders
    net.leave(holders[0].address)
    net.settle()
    text = f"SELECT ?s ?o WHERE (?s, <{env}>, ?o)"
    at = net.live()[0].address
    assert len(net.query(at, text)) == len(net.oracle(text))
