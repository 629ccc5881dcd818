"""A ContextPeer: store, query engine, overlay, push service and wrappers.

A peer is a single-threaded state machine.  Everything it does happens
in response to a delivered message, a timer or an API call, all of which
the hosting runtime (the simulator or the TCP transport) serializes onto
one loop.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .net.codec import DEFAULT_TTL, FrameError, Message, MessageType, REPLY_TYPES, validate_payload
from .pubsub import EVENTS, PubSubLayer, SubscriptionError
from .rdql import (
    ResultSet, evaluate_local, format_resultset, parse_filter, parse_pattern, parse_query,
)
from .ring import (
    JoinError, NodeRef, RingProtocol, RoutingError, RpcTimeout, elect_dominant, hash64,
    make_node_id,
)
from .semantic import ClusterMapping, DistributedQueryError, SemanticLayer
from .store import ChangeSet, TripleStore
from .tasks import Future, background, spawn
from .terms import Triple, ValidationError, load_triples, parse_triple
from .wrappers import (
    ACCUMULATE, FUNCTIONAL, PlaybackSource, RandomWalkSource, WrapperBinding, WrapperSet,
)

log = logging.getLogger(__name__)

CONFIG_ENV = "CTXPEER_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class NodeConfig:
    address: str = "127.0.0.1:7400"
    bootstrap: Optional[str] = None
    mapping: Optional[str] = None
    mapping_lines: list = field(default_factory=list)
    fixture: Optional[str] = None
    triples: list = field(default_factory=list)
    node_id: Optional[int] = None
    wrappers: list = field(default_factory=list)
    # timers, milliseconds
    stabilize_period: int = 500
    fix_fingers_period: int = 500
    maintenance_period: int = 1000
    rpc_timeout: int = 400
    join_timeout: int = 2000
    join_retries: int = 3
    fail_after: int = 3
    lease: int = 60_000
    register_backoff: int = 1000
    head_check_period: int = 1000
    register_backoff_cap: int = 30_000
    sub_lease: int = 60_000
    retry_backoff: tuple = (1000, 2000, 4000)
    subquery_timeout: int = 5000
    # ring constants
    prefix_bits: int = 16
    successors: int = 4
    ttl: int = DEFAULT_TTL
    walk_ttl: int = 1024
    # flags
    allow_broadcast: bool = False
    partial_ok: bool = False

    def __post_init__(self):
        self.retry_backoff = tuple(self.retry_backoff)
        self.validate()

    def validate(self):
        if not isinstance(self.address, str) or not self.address:
            raise ConfigError("address must be a non-empty string")
        if not 1 <= self.prefix_bits <= 32:
            raise ConfigError("prefix_bits must be in [1, 32]")
        if not 1 <= self.successors <= 32:
            raise ConfigError("successors must be in [1, 32]")
        if not 1 <= self.ttl <= 1024:
            raise ConfigError("ttl must be in [1, 1024]")
        if self.walk_ttl < 1:
            raise ConfigError("walk_ttl must be positive")
        for name in ("stabilize_period", "fix_fingers_period", "maintenance_period",
                     "rpc_timeout", "join_timeout", "lease", "register_backoff", "head_check_period",
                     "register_backoff_cap", "sub_lease", "subquery_timeout", "fail_after"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.retry_backoff or any(w <= 0 for w in self.retry_backoff):
            raise ConfigError("retry_backoff must be non-empty positive delays")
        if self.node_id is not None and not 0 <= self.node_id < 2 ** 64:
            raise ConfigError("node_id must fit in 64 bits")

    @classmethod
    def from_dict(cls, data, base_dir=None):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if base_dir:
            for key in ("mapping", "fixture"):
                if data.get(key) and not os.path.isabs(data[key]):
                    data[key] = os.path.join(base_dir, data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path=None):
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            raise ConfigError(f"no config path given and ${CONFIG_ENV} is unset")
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data, os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        d = asdict(self)
        d["retry_backoff"] = list(self.retry_backoff)
        return d

    def load_mapping(self) -> ClusterMapping:
        if self.mapping:
            try:
                return ClusterMapping.load(self.mapping)
            except OSError as exc:
                raise ConfigError(f"cannot read mapping {self.mapping}: {exc}") from None
        return ClusterMapping.parse(self.mapping_lines)


class Repeating:
    """A periodic timer on a runtime."""

    def __init__(self, runtime, period, fn, offset=0):
        self.runtime, self.period, self.fn = runtime, period, fn
        self.handle = runtime.call_later(offset, self._fire)
        self.active = True

    def _fire(self):
        if not self.active:
            return
        self.handle = self.runtime.call_later(self.period, self._fire)
        self.fn()

    def cancel(self):
        self.active = False
        if self.handle is not None:
            self.handle.cancel()


def build_wrapper(entry: dict, base_dir=None) -> WrapperBinding:
    """Build a binding from a config dict (``source``: playback|randomwalk)."""
    kind = entry.get("source")
    mode = entry.get("mode", FUNCTIONAL)
    period = int(entry.get("period", 1000))
    if kind == "playback":
        if "rows" in entry:
            src = PlaybackSource.from_lines(entry["rows"])
        else:
            path = entry["file"]
            if base_dir and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            src = PlaybackSource.load(path)
    elif kind == "randomwalk":
        src = RandomWalkSource(entry.get("seed", 0), entry["entity"], entry["attribute"],
                               entry["start"], entry["step"], entry["min"], entry["max"])
    else:
        raise ConfigError(f"unknown wrapper source {kind!r}")
    if mode not in (FUNCTIONAL, ACCUMULATE):
        raise ConfigError(f"unknown wrapper mode {mode!r}")
    return WrapperBinding(src, period, mode)


class ContextPeer:
    """One context producer peer.

    ``runtime`` provides ``now()``, ``transmit(msg)``, ``call_later(ms, fn,
    *args)``, ``defer(fn, *args)``, ``register(address, handler)`` and
    ``unregister(address)``.
    """

    def __init__(self, config: NodeConfig, runtime, mapping=None, store=None, base_dir=None):
        self.config = config
        self.runtime = runtime
        self.address = config.address
        self.mapping = mapping if mapping is not None else config.load_mapping()
        self.store = store if store is not None else TripleStore(mapping=self.mapping)
        self.store.mapping = self.mapping
        if config.fixture:
            for t in load_triples(config.fixture):
                self.store.insert(t)
        for line in config.triples:
            self.store.insert(parse_triple(line))
        self.base_dir = base_dir
        self.wrappers = WrapperSet(self.store, on_change=self.apply_change)
        self.ring = None
        self.semantic = SemanticLayer(self)
        self.pubsub = PubSubLayer(self)
        self.label = None
        self.running = False
        self.rng = random.Random(hash64(self.address) ^ getattr(runtime, "seed", 0))
        self._msg_ids = itertools.count(1)
        self._pending = {}
        self._timers = []
        self._wrapper_timers = {}
        self.change_log = []
        self.record_changes = False
        self.counters = Counter()
        self.handlers = self._handler_table()

    # -- runtime plumbing -----------------------------------------------------

    def now(self) -> int:
        return self.runtime.now()

    def call_later(self, delay, fn, *args):
        return self.runtime.call_later(delay, fn, *args)

    def defer(self, fn, *args):
        self.runtime.defer(fn, *args)

    def send(self, dst, kind, payload, ttl=None) -> int:
        mid = next(self._msg_ids)
        msg = Message(kind, self.address, dst, mid,
                      self.config.ttl if ttl is None else ttl, payload)
        self.counters["sent"] += 1
        self.runtime.transmit(msg)
        return mid

    def reply(self, msg: Message, kind, payload):
        payload = dict(payload, re=msg.msg_id)
        self.send(msg.src, kind, payload)

    def rpc(self, dst, kind, payload, timeout=None) -> Future:
        fut = Future()
        mid = self.send(dst, kind, payload)
        timer = self.call_later(timeout or self.config.rpc_timeout, self._rpc_expired, mid)
        self._pending[mid] = (fut, timer, dst, kind)
        return fut

    def _rpc_expired(self, mid):
        entry = self._pending.pop(mid, None)
        if entry is not None:
            fut, _, dst, kind = entry
            fut.set_exception(RpcTimeout(dst, kind))

    def timeout(self, fut: Future, delay) -> Future:
        """Future mirroring ``fut`` that fails with RpcTimeout after ``delay``."""
        out = Future()
        timer = self.call_later(delay, lambda: out.set_exception(RpcTimeout("", "wait")))

        def done(f):
            timer.cancel()
            if f.exception() is not None:
                out.set_exception(f.exception())
            else:
                out.set_result(f.result())

        fut.add_done_callback(done)
        return out

    def sleep(self, delay) -> Future:
        fut = Future()
        self.call_later(delay, fut.set_result, None)
        return fut

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> Future:
        """Elect the dominant cluster, join (or found) the ring, start timers."""
        return spawn(self._start(), "start")

    def _start(self):
        cfg = self.config
        self.label = elect_dominant(self.store.stats(), self.mapping.default)
        node_id = cfg.node_id if cfg.node_id is not None else \
            make_node_id(self.label, self.address, cfg.prefix_bits)
        self.ring = RingProtocol(self, NodeRef(node_id, self.address))
        self.runtime.register(self.address, self.dispatch)
        self.running = True
        if cfg.bootstrap and cfg.bootstrap != self.address:
            last = None
            for _ in range(cfg.join_retries):
                try:
                    yield from self.ring.join(cfg.bootstrap)
                    break
                except RpcTimeout as exc:
                    last = exc
            else:
                self.running = False
                self.runtime.unregister(self.address)
                raise JoinError(f"bootstrap {cfg.bootstrap} unreachable: {last}")
        else:
            self.ring.create()
        self._start_timers()
        self.semantic.sync_registrations()
        for entry in cfg.wrappers:
            self.attach(build_wrapper(entry, self.base_dir))
        return self.ring.me

    def _start_timers(self):
        cfg = self.config
        expected = (RpcTimeout, RoutingError)

        def stabilize():
            background(self.ring.stabilize(), "stabilize", expected)
            background(self.ring.check_predecessor(), "check_predecessor", expected)

        def fix():
            background(self.ring.fix_fingers(), "fix_fingers", expected)

        def maintain():
            self.semantic.expire()
            self.semantic.audit_registry()
            self.pubsub.expire()

        self._timers = [
            Repeating(self.runtime, cfg.stabilize_period, stabilize,
                      self.rng.randrange(cfg.stabilize_period)),
            Repeating(self.runtime, cfg.fix_fingers_period, fix,
                      self.rng.randrange(cfg.fix_fingers_period)),
            Repeating(self.runtime, cfg.maintenance_period, maintain,
                      self.rng.randrange(cfg.maintenance_period)),
        ]

    def _stop(self):
        for t in self._timers:
            t.cancel()
        self._timers = []
        for t in self._wrapper_timers.values():
            t.cancel()
        self._wrapper_timers = {}
        for local in self.pubsub.own.values():
            if local.timer is not None:
                local.timer.cancel()
        for fut, timer, dst, kind in self._pending.values():
            timer.cancel()
        self._pending.clear()
        self.running = False
        self.runtime.unregister(self.address)

    def shutdown(self):
        """Graceful leave: hand registry and subscriptions to the successor."""
        if not self.running:
            return
        if self.ring is not None and self.ring.joined:
            self.ring.leave()
        self._stop()

    def crash(self):
        """Stop without any handoff (failure injection)."""
        if self.running:
            if self.ring is not None:
                self.ring.joined = False
            self._stop()

    # -- data API -------------------------------------------------------------

    def apply_change(self, cs: ChangeSet):
        """Funnel for every store mutation: push matching, then registrations."""
        if not cs:
            return
        if self.record_changes:
            self.change_log.append((self.now(), cs))
        # registration first, so a newly held cluster buffers this change
        if self.ring is not None:
            self.semantic.sync_registrations()
        self.pubsub.on_change(cs)

    def put(self, t) -> bool:
        t = parse_triple(t) if isinstance(t, str) else t
        cs = self.store.insert_change(t)
        self.apply_change(cs)
        return bool(cs)

    def remove(self, t) -> bool:
        t = parse_triple(t) if isinstance(t, str) else t
        cs = self.store.remove_change(t)
        self.apply_change(cs)
        return bool(cs)

    def replace(self, subject, predicate, value) -> ChangeSet:
        cs = self.store.replace_functional(subject, predicate, value)
        self.apply_change(cs)
        return cs

    def attach(self, binding: WrapperBinding) -> int:
        handle = self.wrappers.attach(binding, self.now())
        if self.running:
            self._wrapper_timers[handle] = Repeating(
                self.runtime, binding.period, lambda: self.wrappers.tick(handle, self.now()),
                binding.period)
        return handle

    def detach(self, handle):
        timer = self._wrapper_timers.pop(handle, None)
        if timer is not None:
            timer.cancel()
        self.wrappers.detach(handle)

    def tick_wrappers(self):
        for handle in sorted(self.wrappers.bindings):
            self.wrappers.tick(handle, self.now())

    def query(self, text, partial_ok=None) -> Future:
        """Pull service: parse then execute; resolves to a ResultSet."""
        try:
            q = parse_query(text) if isinstance(text, str) else text
        except ValueError as exc:
            fut = Future()
            fut.set_exception(exc)
            return fut
        if self.ring is None or self.ring.alone():
            from .semantic import PartialResult, decompose
            if any(s.broadcast for s in decompose(q, self.mapping)) and \
                    not self.config.allow_broadcast:
                fut = Future()
                fut.set_exception(DistributedQueryError(
                    "variable-predicate patterns need allow_broadcast"))
                return fut
            rs = evaluate_local(q, self.store)
            ok = self.config.partial_ok if partial_ok is None else partial_ok
            return Future.resolved(PartialResult(rs, {}) if ok else rs)
        return spawn(self.semantic.execute_distributed(q, partial_ok), "query")

    def subscribe(self, pattern, filters=(), lease=None, events=EVENTS, callback=None,
                  auto_renew=False) -> Future:
        """Push service; resolves to ``(subscription_id, ack_count)``."""
        try:
            if isinstance(pattern, str):
                pattern = parse_pattern(pattern)
            filters = tuple(parse_filter(f) if isinstance(f, str) else f for f in filters)
        except ValueError as exc:
            fut = Future()
            fut.set_exception(exc)
            return fut
        return spawn(self.pubsub.subscribe(pattern, filters, lease, events, callback,
                                           auto_renew), "subscribe")

    def renew(self, sub_id, extension=None) -> Future:
        return spawn(self.pubsub.renew(sub_id, extension), "renew")

    def unsubscribe(self, sub_id) -> Future:
        return spawn(self.pubsub.unsubscribe(sub_id), "unsubscribe")

    def stats(self) -> dict:
        ring = self.ring
        return {
            "address": self.address,
            "id": ring.me.id if ring else None,
            "label": self.label,
            "triples": len(self.store),
            "clusters": self.store.stats(),
            "predecessor": ring.predecessor.address if ring and ring.predecessor else None,
            "successors": [n.address for n in ring.state.successors] if ring else [],
            "registry": len(self.semantic.registry),
            "subscriptions": len(self.pubsub.table),
            "notifications": {"sent": self.pubsub.sent, "acked": self.pubsub.acked,
                              "retries": self.pubsub.retries, "dropped": self.pubsub.dropped},
            "wrapper_errors": self.wrappers.errors,
            "counters": dict(sorted(self.counters.items())),
        }

    # -- ring hooks -----------------------------------------------------------

    def on_predecessor_changed(self, old, new):
        if new is not None and new.address != self.address:
            self.semantic.transfer_to_predecessor(new)
            self.pubsub.push_moved_heads(new)

    def on_successor_changed(self, old, new):
        if new is not None and new.address != self.address:
            self.pubsub.push_to_arc_member(new)

    def handoff_payload(self):
        return {"registry": self.semantic.export_registry(),
                "subscriptions": self.pubsub.export()}

    def adopt_handoff(self, payload):
        self.semantic.adopt_registry(payload.get("registry") or [])
        self.pubsub.adopt(payload.get("subscriptions") or [])

    # -- dispatch -------------------------------------------------------------

    def _handler_table(self):
        M = MessageType
        return {
            M.GET_SUCCESSOR: lambda m: self.ring.on_get_successor(m),
            M.GET_PREDECESSOR: lambda m: self.ring.on_get_predecessor(m),
            M.NOTIFY: lambda m: self.ring.on_notify(m),
            M.PING: lambda m: self.ring.on_ping(m),
            M.JOIN_REQ: lambda m: self.ring.on_join_req(m),
            M.LEAVE_HANDOFF: lambda m: self.ring.on_leave_handoff(m),
            M.SUCCESSOR_IS: self._on_reply,
            M.PREDECESSOR_IS: self._on_reply,
            M.PONG: self._on_reply,
            M.JOIN_ACK: self._on_reply,
            M.REGISTER_ACK: self._on_reply,
            M.CLIENT_REPLY: self._on_reply,
            M.SUBQUERY: self.semantic.on_subquery,
            M.SUBQUERY_RESULT: self.semantic.on_fanout_reply,
            M.REGISTER: self.semantic.on_register,
            M.RENEW: self.semantic.on_register,
            M.DEREGISTER: self.semantic.on_deregister,
            M.SUBSCRIBE: self.pubsub.on_fanout,
            M.RENEW_SUB: self.pubsub.on_fanout,
            M.UNSUBSCRIBE: self.pubsub.on_fanout,
            M.SUB_ACK: self.semantic.on_fanout_reply,
            M.NOTIFY_EVENT: self.pubsub.on_notify_event,
            M.NOTIFY_ACK: self.pubsub.on_notify_ack,
            M.CLIENT_QUERY: self._on_client_query,
            M.CLIENT_PUT: self._on_client_put,
            M.CLIENT_RM: self._on_client_put,
            M.CLIENT_SUBSCRIBE: self._on_client_subscribe,
            M.CLIENT_EVENT: self._on_client_event,
        }

    def dispatch(self, msg: Message):
        """Handle one delivered message; malformed input is counted and dropped."""
        if not self.running:
            self.counters["dropped_stopped"] += 1
            return
        self.counters["received"] += 1
        if msg.ttl <= 0:
            self.counters["ttl_expired"] += 1
            return
        handler = self.handlers.get(msg.type)
        if handler is None:
            self.counters["unknown_kind"] += 1
            return
        try:
            validate_payload(msg)
            handler(msg)
        except (FrameError, KeyError, TypeError, ValueError, AttributeError, IndexError,
                ValidationError) as exc:
            self.counters["malformed"] += 1
            log.debug("%s: dropped malformed %s from %s: %r", self.address, msg.type,
                      msg.src, exc)

    def _on_reply(self, msg):
        entry = self._pending.pop(msg.payload["re"], None)
        if entry is None:
            self.counters["late_reply"] += 1
            return
        fut, timer, dst, kind = entry
        timer.cancel()
        fut.set_result(msg)

    # -- application clients over the wire ------------------------------------

    def _client_done(self, msg, fut, render):
        def done(f):
            exc = f.exception()
            if exc is not None:
                self.reply(msg, MessageType.CLIENT_REPLY,
                           {"ok": False, "error": f"{type(exc).__name__}: {exc}"})
            else:
                self.reply(msg, MessageType.CLIENT_REPLY, dict(render(f.result()), ok=True))
        fut.add_done_callback(done)

    def _on_client_query(self, msg):
        fut = self.query(msg.payload["text"], msg.payload.get("partial_ok"))

        def render(res):
            if isinstance(res, ResultSet):
                return {"result": format_resultset(res)}
            return {"result": format_resultset(res.results), "status": res.status}

        self._client_done(msg, fut, render)

    def _on_client_put(self, msg):
        try:
            t = parse_triple(msg.payload["triple"])
        except ValidationError as exc:
            self.reply(msg, MessageType.CLIENT_REPLY, {"ok": False, "error": str(exc)})
            return
        changed = self.put(t) if msg.type == MessageType.CLIENT_PUT else self.remove(t)
        self.reply(msg, MessageType.CLIENT_REPLY, {"ok": True, "changed": changed})

    def _on_client_subscribe(self, msg):
        client = msg.src

        def forward(sub_id, kind, triple, producer):
            self.send(client, MessageType.CLIENT_EVENT, {
                "sub": sub_id, "kind": kind, "triple": str(triple), "producer": producer})

        p = msg.payload
        events = tuple(p.get("events") or EVENTS)
        fut = self.subscribe(p["pattern"], p["filters"], p["lease"], events, forward)
        self._client_done(msg, fut, lambda r: {"sub": r[0], "acks": r[1]})

    def _on_client_event(self, msg):
        self.counters["client_event_ignored"] += 1


__all__ = ["NodeConfig", "ContextPeer", "ConfigError", "build_wrapper", "Repeating",
           "SubscriptionError"]
