"""Push service: leased single-pattern subscriptions and change notification.

Subscriptions are stored on the producers of the pattern's cluster (arc
members, registry members and the arc head).  Producers match every local
ChangeSet against their active subscriptions and push notifications
straight to the subscriber, retrying with backoff until acknowledged.
Subscribers drop duplicates by ``(producer, subscription, seq)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

from .net.codec import MessageType
from .rdql import Filter, filter_from_json, filter_to_json, pattern_from_json, pattern_to_json
from .ring import NodeRef, RoutingError, RpcTimeout, in_interval, prefix_of
from .semantic import BROADCAST, FanoutTimeout
from .tasks import Future, background
from .terms import Triple, TriplePattern, Variable, parse_triple

log = logging.getLogger(__name__)

EVENTS = ("added", "removed")


class SubscriptionError(Exception):
    pass


class NotRegistered(SubscriptionError):
    """No producer acknowledged the subscription."""


class SubscriptionNotFound(SubscriptionError):
    pass


@dataclass
class Subscription:
    id: str
    subscriber: str
    pattern: TriplePattern
    filters: tuple = ()
    events: frozenset = frozenset(EVENTS)
    expiry: int = 0
    label: str = ""

    def __post_init__(self):
        self.filters = tuple(self.filters)
        self.events = frozenset(self.events)
        if not self.events or not self.events <= set(EVENTS):
            raise SubscriptionError(f"events must be a non-empty subset of {EVENTS}")
        names = {v.name for v in self.pattern.variables}
        for f in self.filters:
            if f.variable.name not in names:
                raise SubscriptionError(f"filter variable {f.variable} not in pattern")

    def accepts(self, kind: str, t: Triple) -> bool:
        if kind not in self.events:
            return False
        b = self.pattern.bind(t)
        if b is None:
            return False
        return all(f.test(b[f.variable.name]) for f in self.filters)

    def to_json(self, now):
        return {"id": self.id, "subscriber": self.subscriber,
                "pattern": pattern_to_json(self.pattern),
                "filters": [filter_to_json(f) for f in self.filters],
                "events": sorted(self.events), "lease": self.expiry - now,
                "label": self.label}

    @classmethod
    def from_json(cls, obj, now):
        lease = int(obj["lease"])
        return cls(obj["id"], obj["subscriber"], pattern_from_json(obj["pattern"]),
                   tuple(filter_from_json(f) for f in obj["filters"]),
                   frozenset(obj["events"]), now + lease, obj.get("label", ""))


@dataclass(frozen=True)
class Notification:
    subscription: str
    kind: str
    triple: Triple
    producer: str
    seq: int

    @property
    def key(self):
        return (self.producer, self.subscription, self.seq)


class SubscriptionTable:
    """Producer-side store of active subscriptions and per-subscription seq."""

    def __init__(self):
        self.subs = {}
        self._seq = {}

    def add(self, sub: Subscription) -> bool:
        old = self.subs.get(sub.id)
        if old is not None:
            old.expiry = max(old.expiry, sub.expiry)
            return False
        self.subs[sub.id] = sub
        return True

    def renew(self, sub_id, extension, now) -> bool:
        sub = self.subs.get(sub_id)
        if sub is None or sub.expiry <= now:
            return False
        sub.expiry = max(sub.expiry, now + extension)
        return True

    def remove(self, sub_id) -> bool:
        return self.subs.pop(sub_id, None) is not None

    def expire(self, now):
        for sid in [s for s, sub in self.subs.items() if sub.expiry <= now]:
            del self.subs[sid]

    def active(self, now):
        return [s for _, s in sorted(self.subs.items()) if s.expiry > now]

    def on_change(self, cs, now, producer) -> list:
        """One notification per (active subscription, matching change)."""
        out = []
        subs = self.active(now)
        if not subs:
            return out
        for kind, t in cs.changes():
            for sub in subs:
                if sub.accepts(kind, t):
                    out.append(self.notification(sub, kind, t, producer))
        return out

    def notification(self, sub, kind, t, producer) -> Notification:
        seq = self._seq.get(sub.id, 0) + 1
        self._seq[sub.id] = seq
        return Notification(sub.id, kind, t, producer, seq)

    def __len__(self):
        return len(self.subs)


class Inbox:
    """Subscriber-side duplicate filter."""

    def __init__(self):
        self.seen = set()
        self.duplicates = 0

    def accept(self, n: Notification) -> bool:
        if n.key in self.seen:
            self.duplicates += 1
            return False
        self.seen.add(n.key)
        return True


@dataclass
class LocalSubscription:
    sub: Subscription
    callback: object
    lease: int
    acks: int = 0
    auto_renew: bool = False
    timer: object = None
    delivered: list = field(default_factory=list)


class PubSubLayer:
    def __init__(self, peer):
        self.peer = peer
        self.cfg = peer.config
        self.table = SubscriptionTable()
        self.inbox = Inbox()
        self.own = {}
        self._seq = itertools.count(1)
        self._awaiting = {}
        self.pending = {}
        self.sent = 0
        self.acked = 0
        self.retries = 0
        self.dropped = 0

    @property
    def semantic(self):
        return self.peer.semantic

    def label_of(self, pattern: TriplePattern) -> str:
        if isinstance(pattern.predicate, Variable):
            return BROADCAST
        return self.peer.mapping.cluster_of(pattern.predicate)

    # -- subscriber side ------------------------------------------------------

    def subscribe(self, pattern, filters=(), lease=None, events=EVENTS, callback=None,
                  auto_renew=False):
        """Coroutine: register a subscription with the producers of its cluster.

        Returns ``(subscription_id, ack_count)``.
        """
        lease = self.cfg.sub_lease if lease is None else int(lease)
        if lease <= 0:
            raise SubscriptionError("lease must be in the future")
        label = self.label_of(pattern)
        broadcast = label == BROADCAST
        if broadcast and not self.cfg.allow_broadcast:
            raise SubscriptionError("variable-predicate subscriptions need allow_broadcast")
        now = self.peer.now()
        sub_id = f"{self.peer.address}#{next(self._seq)}"
        sub = Subscription(sub_id, self.peer.address, pattern, tuple(filters),
                           frozenset(events), now + lease, label)
        local = LocalSubscription(sub, callback, lease, auto_renew=auto_renew)
        self.own[sub_id] = local
        replies = yield from self._fan(MessageType.SUBSCRIBE, sub, {"sub": sub.to_json(now)})
        count = sum(1 for r in replies.values() if r.get("stored") and r.get("producer", True))
        if count == 0:
            self.own.pop(sub_id, None)
            if any(r.get("stored") for r in replies.values()):
                yield from self._fan(MessageType.UNSUBSCRIBE, sub, {"id": sub_id})
            raise NotRegistered(f"no producer registered subscription for cluster {label}")
        local.acks = count
        if auto_renew:
            self._schedule_renew(local)
        return sub_id, count

    def _fan(self, kind, sub, body):
        try:
            replies, _ = yield from self.semantic.fan_out(
                kind, sub.label, body, self.cfg.subquery_timeout,
                broadcast=sub.label == BROADCAST)
        except FanoutTimeout as exc:
            replies = exc.replies
        except (RoutingError, RpcTimeout):
            replies = {}
        return replies

    def renew(self, sub_id, extension=None):
        """Coroutine: extend a lease on every producer; returns the count found."""
        local = self.own.get(sub_id)
        if local is None:
            raise SubscriptionNotFound(sub_id)
        extension = local.lease if extension is None else int(extension)
        replies = yield from self._fan(MessageType.RENEW_SUB, local.sub,
                                       {"id": sub_id, "extension": extension})
        found = sum(1 for r in replies.values() if r.get("found"))
        if found == 0:
            raise SubscriptionNotFound(f"{sub_id} unknown to every producer; re-subscribe")
        local.sub.expiry = max(local.sub.expiry, self.peer.now() + extension)
        return found

    def unsubscribe(self, sub_id):
        """Coroutine: drop the subscription locally and on its producers."""
        local = self.own.pop(sub_id, None)
        if local is None:
            raise SubscriptionNotFound(sub_id)
        if local.timer is not None:
            local.timer.cancel()
        replies = yield from self._fan(MessageType.UNSUBSCRIBE, local.sub, {"id": sub_id})
        return sum(1 for r in replies.values() if r.get("removed"))

    def _schedule_renew(self, local):
        def fire():
            if local.sub.id in self.own:
                background(self._renew_then_reschedule(local), "auto-renew",
                           (SubscriptionError, RoutingError, RpcTimeout))
        local.timer = self.peer.call_later(max(local.lease // 2, 1), fire)

    def _renew_then_reschedule(self, local):
        try:
            yield from self.renew(local.sub.id)
        finally:
            if local.sub.id in self.own:
                self._schedule_renew(local)

    def on_notify_event(self, msg):
        p = msg.payload
        n = Notification(p["sub"], p["kind"], parse_triple(p["triple"]), p["producer"], p["seq"])
        self.peer.reply(msg, MessageType.NOTIFY_ACK,
                        {"sub": n.subscription, "seq": n.seq, "producer": n.producer})
        local = self.own.get(n.subscription)
        if local is None or not self.inbox.accept(n):
            return
        local.delivered.append(n)
        if local.callback is not None:
            self.peer.defer(local.callback, n.subscription, n.kind, n.triple, n.producer)

    # -- producer side --------------------------------------------------------

    def _local(self, kind):
        def handler(p):
            body = p["body"]
            now = self.peer.now()
            if kind is MessageType.SUBSCRIBE:
                sub = Subscription.from_json(body["sub"], now)
                if sub.expiry <= now:
                    return {"stored": False, "error": "lease expired"}
                self.table.add(sub)
                return {"stored": True, "producer": self.produces(sub.label)}
            if kind is MessageType.RENEW_SUB:
                return {"found": self.table.renew(body["id"], int(body["extension"]), now)}
            return {"removed": self.table.remove(body["id"])}
        return handler

    def produces(self, label) -> bool:
        """Arc member of ``label`` or holder of some of its triples."""
        if label == BROADCAST:
            return len(self.peer.store) > 0
        me = self.peer.ring.me.id
        if prefix_of(me, self.cfg.prefix_bits) == self.semantic.label_prefix(label):
            return True
        return self.peer.store.stats().get(label, 0) > 0

    def on_fanout(self, msg):
        self.semantic.on_fanout(msg, self._local(msg.type))

    def on_change(self, cs):
        """Match a ChangeSet against active subscriptions and push the results."""
        if not cs:
            return []
        if self.pending:
            cluster_of = self.peer.mapping.cluster_of
            for kind, t in cs.changes():
                buf = self.pending.get(cluster_of(t.predicate))
                if buf is not None:
                    buf.append((kind, t))
        notes = self.table.on_change(cs, self.peer.now(), self.peer.address)
        for n in notes:
            background(self.deliver(n), "deliver")
        return notes

    def deliver(self, n: Notification, subscriber=None):
        """Coroutine: push until acknowledged, with retries and backoff."""
        sub = self.table.subs.get(n.subscription)
        dst = subscriber or (sub.subscriber if sub else n.subscription.rsplit("#", 1)[0])
        payload = {"sub": n.subscription, "kind": n.kind, "triple": str(n.triple),
                   "producer": n.producer, "seq": n.seq}
        waits = list(self.cfg.retry_backoff) + [self.cfg.retry_backoff[-1]]
        key = (n.subscription, n.seq)
        for attempt, wait in enumerate(waits):
            acked = Future()
            self._awaiting[key] = acked
            if attempt:
                self.retries += 1
            self.sent += 1
            self.peer.send(dst, MessageType.NOTIFY_EVENT, payload)
            try:
                yield self.peer.timeout(acked, wait)
            except RpcTimeout:
                continue
            finally:
                self._awaiting.pop(key, None)
            self.acked += 1
            return True
        self.dropped += 1
        return False

    def on_notify_ack(self, msg):
        p = msg.payload
        fut = self._awaiting.get((p.get("sub"), p.get("seq")))
        if fut is not None:
            fut.set_result(True)

    def expire(self):
        self.table.expire(self.peer.now())

    # -- registration hand-in -------------------------------------------------

    def begin_pending(self, label):
        """Buffer changes of ``label`` until its registration is acknowledged."""
        self.pending.setdefault(label, [])

    def drop_pending(self, label):
        self.pending.pop(label, None)

    def settle_pending(self, label, entries):
        """Adopt the arc head's subscriptions and replay what they missed."""
        buffered = self.pending.pop(label, [])
        now = self.peer.now()
        fresh = []
        for e in entries:
            sub = Subscription.from_json(e, now)
            if sub.expiry > now and self.table.add(sub):
                fresh.append(sub)
        notes = []
        for kind, t in buffered:
            for sub in fresh:
                if sub.accepts(kind, t):
                    notes.append(self.table.notification(sub, kind, t, self.peer.address))
        for n in notes:
            background(self.deliver(n), "deliver")
        return notes

    def export_label(self, label):
        now = self.peer.now()
        return [s.to_json(now) for s in self.table.active(now) if s.label == label]

    # -- adoption and handoff -------------------------------------------------

    def _send_adopt(self, node: NodeRef, subs):
        now = self.peer.now()
        for sub in subs:
            self.peer.send(node.address, MessageType.SUBSCRIBE, {
                "corr": "", "origin": self.peer.address, "head": node.to_json(),
                "mode": "adopt", "label": sub.label, "prefix": 0,
                "body": {"sub": sub.to_json(now)}})

    def push_to_registrant(self, label, node: NodeRef):
        """A new registry member adopts the standing subscriptions of its cluster."""
        subs = [s for s in self.table.active(self.peer.now()) if s.label == label]
        self._send_adopt(node, subs)

    def push_to_arc_member(self, node: NodeRef):
        """A neighbour that joined an arc adopts that arc's subscriptions."""
        bits = self.cfg.prefix_bits
        prefix = prefix_of(node.id, bits)
        subs = [s for s in self.table.active(self.peer.now())
                if s.label != BROADCAST and self.semantic.label_prefix(s.label) == prefix]
        self._send_adopt(node, subs)

    def push_moved_heads(self, pred: NodeRef):
        """Subscriptions whose arc key moved to a new predecessor follow it."""
        me = self.peer.ring.me
        subs = [s for s in self.table.active(self.peer.now()) if s.label != BROADCAST
                and not in_interval(self.semantic.label_key(s.label), pred.id, me.id)]
        self._send_adopt(pred, subs)

    def export(self):
        now = self.peer.now()
        return [s.to_json(now) for s in self.table.active(now)]

    def adopt(self, entries):
        now = self.peer.now()
        for e in entries:
            sub = Subscription.from_json(e, now)
            if sub.expiry > now:
                self.table.add(sub)


def make_filters(items) -> tuple:
    out = []
    for f in items:
        out.append(f if isinstance(f, Filter) else filter_from_json(f))
    return tuple(out)
