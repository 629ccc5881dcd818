import random

import pytest
from hypothesis import given, strategies as st

from ctxpeers.net.sim import SimConfig
from ctxpeers.ring import (JoinCollision, JoinError, arcs_contiguous, cluster_prefix,
                           elect_dominant, hash64, in_interval, make_node_id, oracle_successor,
                           prefix_of)
from ctxpeers.scenario import SimNetwork
from ctxpeers.tasks import spawn
from oracles import fnv1a_64, prefixes_contiguous, ring_neighbours, successor_of

RING = 2 ** 64
ids64 = st.integers(0, RING - 1)


def test_hash_vectors():
    assert hash64("") == 14695981039346656037
    assert hash64("a") == 0xAF63DC4C8601EC8C
    assert hash64("foobar") == 0x85944171F73967E8


@given(st.binary(max_size=64))
def test_hash_matches_reference(data):
    assert hash64(data) == fnv1a_64(data)


def test_demo_label_prefixes_pinned():
    pinned = {"Location": 60975, "Environment": 9572, "Inventory": 7949,
              "Merchandise": 24268, "Activity": 27766}
    assert {k: cluster_prefix(k) for k in pinned} == pinned


def test_node_id_layout():
    nid = make_node_id("Location", "10.0.0.1:7000")
    assert prefix_of(nid) == cluster_prefix("Location")
    assert make_node_id("Location", "10.0.0.2:7000") != nid


def test_intervals():
    assert in_interval(5, 3, 8)
    assert in_interval(2, RING - 3, 4)
    assert in_interval(8, 3, 8) and not in_interval(8, 3, 8, closed_right=False)
    assert not in_interval(3, 3, 8)
    assert in_interval(7, 7, 7)
    assert not in_interval(7, 7, 7, closed_right=False)
    assert in_interval(9, 7, 7, closed_right=False)


@given(ids64, ids64, ids64)
def test_interval_matches_distance(x, a, b):
    if a != b:
        assert in_interval(x, a, b) == (0 < (x - a) % RING <= (b - a) % RING)


def test_elect_dominant():
    assert elect_dominant({}) == "Misc"
    assert elect_dominant({"B": 3, "A": 3, "C": 1}) == "A"
    assert elect_dominant({"B": 4, "A": 3}) == "B"


@given(st.lists(ids64, min_size=1, max_size=30, unique=True), ids64)
def test_successor_oracles_agree(ids, x):
    assert oracle_successor(ids, x) == successor_of(ids, x)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2 ** 48 - 1)), max_size=40))
def test_contiguity_matches_reference(parts):
    ids = list({(p << 48) | s for p, s in parts})
    assert arcs_contiguous(ids) == prefixes_contiguous(ids)


def _net(**defaults):
    return SimNetwork(SimConfig(seed=1, keep_log=False), defaults=defaults)


def test_single_node_ring():
    net = _net()
    net.join("solo", node_id=123)
    ring = net.peer("solo").ring
    assert ring.predecessor is None and ring.successor.id == 123
    fut = spawn(ring.find_successor(999))
    net.wait(fut)
    assert fut.result()[0].id == 123


def test_two_nodes_stabilize_quickly():
    net = _net()
    net.join("a", node_id=100)
    net.join("b", node_id=2 ** 63)
    for rounds in range(4):
        if net.ring_converged():
            break
        net.rounds(1)
    assert rounds <= 3
    a, b = net.peer("a").ring, net.peer("b").ring
    assert a.successor.address == "b" and a.predecessor.address == "b"
    assert b.successor.address == "a" and b.predecessor.address == "a"


def test_three_injected_ids():
    net = _net()
    for addr, nid in (("n10", 10), ("n20", 20), ("n30", 30)):
        net.join(addr, node_id=nid)
    net.settle()
    for x, want in ((25, 30), (35, 10), (10, 10), (0, 10)):
        fut = spawn(net.peer("n20").ring.find_successor(x))
        net.wait(fut)
        assert fut.result()[0].id == want


def test_join_collision_rejected():
    net = _net()
    net.join("a", node_id=77)
    with pytest.raises(JoinCollision):
        net.join("b", node_id=77)


def test_unreachable_bootstrap():
    net = _net(join_retries=1)
    with pytest.raises(JoinError):
        net.join("lonely", bootstrap="nobody")


def test_random_joins_match_neighbour_oracle():
    rng = random.Random(5)
    net = _net()
    for i in range(30):
        net.join(f"p{i}", node_id=rng.getrandbits(64))
    assert net.settle(100) >= 0
    live = net.live()
    want = ring_neighbours([p.ring.me.id for p in live])
    for p in live:
        assert (p.ring.predecessor.id, p.ring.successor.id) == want[p.ring.me.id]


def test_crash_of_successor_repaired():
    net = _net()
    for i, nid in enumerate((10, 20, 30, 40, 50)):
        net.join(f"n{i}", node_id=nid)
    net.settle()
    net.crash("n2")
    assert net.settle(30) >= 0
    assert net.peer("n1").ring.successor.id == 40
