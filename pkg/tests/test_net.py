import random

import pytest
from hypothesis import given, settings, strategies as st

from ctxpeers.net.codec import (PAYLOAD_FIELDS, FrameError, FrameReader, Message, MessageType,
                                decode, encode, validate_payload)
from ctxpeers.net.sim import SimConfig, Simulator
from fuzz import random_message


def ping(msg_id=1, src="a", dst="b"):
    return Message(MessageType.PING, src, dst, msg_id, 64, {})


def test_ping_round_trip():
    assert decode(encode(ping())) == ping()


def test_truncated_frames():
    frame = encode(ping())
    with pytest.raises(FrameError):
        decode(frame[:2])
    with pytest.raises(FrameError):
        decode(frame[:-1])
    with pytest.raises(FrameError):
        decode(frame + b"x")


def test_unknown_type_and_missing_fields():
    body = b'{"type":"NOPE","src":"a","dst":"b","msgId":1,"ttl":3,"payload":{}}'
    with pytest.raises(FrameError, match="unknown message type"):
        decode(len(body).to_bytes(4, "big") + body)
    body = b'{"type":"PING","src":"a","dst":"b","ttl":3,"payload":{}}'
    with pytest.raises(FrameError, match="msgId"):
        decode(len(body).to_bytes(4, "big") + body)


def test_unknown_top_level_fields_ignored():
    body = b'{"type":"PING","src":"a","dst":"b","msgId":1,"ttl":3,"payload":{},"x":1}'
    assert decode(len(body).to_bytes(4, "big") + body) == Message(MessageType.PING, "a", "b", 1, 3, {})


def test_every_kind_has_a_payload_schema():
    assert set(PAYLOAD_FIELDS) == set(MessageType)


def test_validate_payload():
    validate_payload(Message(MessageType.PONG, "a", "b", 1, 3, {"re": 4}))
    with pytest.raises(FrameError):
        validate_payload(Message(MessageType.PONG, "a", "b", 1, 3, {}))
    with pytest.raises(FrameError):
        validate_payload(Message(MessageType.PONG, "a", "b", 1, 3, {"re": True}))


@settings(max_examples=300)
@given(st.sampled_from(list(MessageType)), st.integers(0, 2 ** 32))
def test_round_trip_every_kind(kind, seed):
    m = random_message(random.Random(seed), kind)
    assert decode(encode(m)) == m


@settings(max_examples=100)
@given(st.lists(st.integers(0, 2 ** 32), min_size=1, max_size=8), st.integers(1, 64))
def test_stream_reader_any_chunking(seeds, chunk):
    msgs = [random_message(random.Random(s), MessageType.NOTIFY_EVENT) for s in seeds]
    stream = b"".join(encode(m) for m in msgs)
    reader, out = FrameReader(), []
    for i in range(0, len(stream), chunk):
        out.extend(reader.feed(stream[i:i + chunk]))
    assert out == msgs and reader.pending == 0


@given(st.binary(max_size=64))
def test_garbage_never_escapes_as_other_errors(data):
    try:
        FrameReader().feed(data)
    except FrameError:
        pass


def test_fixed_latency_delivery():
    sim = Simulator(SimConfig(latency=10))
    seen = []
    sim.register("b", lambda m: seen.append((sim.now(), m.msg_id)))
    sim.transmit(ping())
    sim.run_until(100)
    assert seen == [(10, 1)]


def test_drop_everything():
    sim = Simulator(SimConfig(drop_probability=1.0))
    seen = []
    sim.register("b", seen.append)
    for i in range(50):
        sim.transmit(ping(i))
    sim.run_until(1000)
    assert seen == [] and sim.report()["dropped"] == 50


def test_unknown_destination_is_a_drop():
    sim = Simulator()
    sim.transmit(ping(dst="ghost"))
    sim.run_until(100)
    assert sim.drops["unknown"] == 1


def test_partition_cut_and_heal():
    sim = Simulator(SimConfig(partitions=[{"at": 0, "action": "cut", "a": ["a"], "b": ["b"]},
                                          {"at": 50, "action": "heal", "a": ["a"], "b": ["b"]}]))
    seen = []
    sim.register("b", seen.append)
    sim.run_until(1)
    sim.transmit(ping(1))
    sim.run_until(60)
    sim.transmit(ping(2))
    sim.run_until(200)
    assert [m.msg_id for m in seen] == [2] and sim.drops["partition"] == 1


def test_timers_fire_in_order_and_cancel():
    sim = Simulator()
    fired = []
    sim.call_later(30, fired.append, "c")
    sim.call_later(10, fired.append, "a")
    sim.call_later(10, fired.append, "b")
    sim.call_later(20, fired.append, "x").cancel()
    sim.run_until(100)
    assert fired == ["a", "b", "c"]


def _chatter(seed):
    sim = Simulator(SimConfig(seed=seed, latency=(1, 30), drop_probability=0.2, codec=True))
    rng = random.Random(seed)
    for name in "abcd":
        sim.register(name, lambda m, name=name: rng.random() < 0.5 and sim.transmit(
            Message(MessageType.PING, name, rng.choice("abcd"), m.msg_id + 1, 64, {})))
    for i in range(20):
        sim.transmit(Message(MessageType.PING, "a", rng.choice("bcd"), i * 100, 64, {}))
    sim.run_until(5000)
    return sim.log, sim.report()


def test_same_seed_same_log():
    assert _chatter(3) == _chatter(3)
    assert _chatter(3)[0] != _chatter(4)[0]


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        SimConfig(latency=(5, 1))
    with pytest.raises(ValueError):
        SimConfig(drop_probability=1.5)
