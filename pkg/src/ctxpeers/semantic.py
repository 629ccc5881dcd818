"""Semantic layer: predicate clusters, arc registries and distributed queries.

Every predicate maps to a cluster label.  Producers whose ID prefix is a
label's prefix sit on that label's arc; producers that hold triples of a
label without living on its arc register with the arc head (the node that
owns the arc's first point) under a lease.  A distributed query is split
per cluster, each part walks its arc plus the registry members, and the
originator joins the per-pattern partial results.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple

from .net.codec import MessageType
from .rdql import (
    Query, ResultSet, finish, join_bindings, pattern_from_json, pattern_results,
    pattern_to_json,
)
from .ring import (
    NodeRef, RoutingError, RpcTimeout, arc_key, cluster_prefix, in_interval, prefix_of,
)
from .tasks import Future, background, gather, spawn
from .terms import Iri, ValidationError, Variable

log = logging.getLogger(__name__)

DEFAULT_LABEL = "Misc"
BROADCAST = "*"


# -- cluster mapping ---------------------------------------------------------

@dataclass(frozen=True)
class MappingRule:
    target: str
    label: str
    prefix: bool = False

    def matches(self, predicate: str) -> bool:
        return predicate.startswith(self.target) if self.prefix else predicate == self.target


class ClusterMapping:
    """Ordered predicate -> cluster label rules; the first match wins.

    File format, one rule per line (``#`` starts a comment)::

        functional <http://ctx.example.org/temperature> Environment
        <http://ctx.example.org/loc/*> Location
    """

    def __init__(self, rules=(), functional=(), default=DEFAULT_LABEL):
        self.rules = list(rules)
        self.functional = {f.value if isinstance(f, Iri) else f for f in functional}
        self.default = default
        self._cache = {}

    @classmethod
    def parse(cls, lines, default=DEFAULT_LABEL):
        rules, functional = [], set()
        for n, raw in enumerate(lines, 1):
            line = _COMMENT_RE.sub("", raw).strip()
            if not line:
                continue
            parts = line.split()
            is_functional = parts[0] == "functional"
            if is_functional:
                parts = parts[1:]
            if len(parts) != 2:
                raise ValidationError(f"line {n}: expected '[functional] <predicate> Label'")
            target, label = parts
            if target.startswith("<") and target.endswith(">"):
                target = target[1:-1]
            is_prefix = target.endswith("*")
            if is_prefix:
                target = target[:-1]
                if is_functional:
                    raise ValidationError(f"line {n}: prefix rules cannot be functional")
            else:
                Iri(target)
            if "://" not in target:
                raise ValidationError(f"line {n}: {target!r} is not an absolute IRI")
            rules.append(MappingRule(target, label, is_prefix))
            if is_functional:
                functional.add(target)
        return cls(rules, functional, default)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh)

    def cluster_of(self, predicate) -> str:
        key = predicate.value if isinstance(predicate, Iri) else predicate
        label = self._cache.get(key)
        if label is None:
            label = next((r.label for r in self.rules if r.matches(key)), self.default)
            self._cache[key] = label
        return label

    def is_functional(self, predicate) -> bool:
        key = predicate.value if isinstance(predicate, Iri) else predicate
        return key in self.functional

    @property
    def labels(self):
        return sorted({r.label for r in self.rules} | {self.default})

    def lines(self):
        for r in self.rules:
            flag = "functional " if r.target in self.functional and not r.prefix else ""
            yield f"{flag}<{r.target}{'*' if r.prefix else ''}> {r.label}"


_COMMENT_RE = re.compile(r"(^|\s)#.*$")


def cluster_of(predicate, mapping: ClusterMapping) -> str:
    return mapping.cluster_of(predicate)


# -- decomposition -----------------------------------------------------------

@dataclass
class SubQuery:
    label: str
    patterns: list
    indices: list = field(default_factory=list)
    broadcast: bool = False


def decompose(q: Query, mapping: ClusterMapping) -> list:
    """Group patterns by the cluster of their bound predicate.

    Groups keep textual order of first appearance; patterns with a
    variable predicate go into one broadcast group.
    """
    groups = {}
    for i, p in enumerate(q.patterns):
        if isinstance(p.predicate, Variable):
            key = BROADCAST
        else:
            key = mapping.cluster_of(p.predicate)
        if key not in groups:
            groups[key] = SubQuery(key, [], [], broadcast=key == BROADCAST)
        groups[key].patterns.append(p)
        groups[key].indices.append(i)
    return list(groups.values())


# -- registry ----------------------------------------------------------------

class ClusterRegistry:
    """Per-label leased membership held by an arc head."""

    def __init__(self):
        self._entries = {}

    def upsert(self, label, node: NodeRef, expiry: int) -> bool:
        """Insert or extend; True if the entry is new."""
        bucket = self._entries.setdefault(label, {})
        old = bucket.get(node.address)
        bucket[node.address] = (node, max(expiry, old[1]) if old else expiry)
        return old is None

    def remove(self, label, address) -> bool:
        bucket = self._entries.get(label)
        if not bucket or address not in bucket:
            return False
        del bucket[address]
        if not bucket:
            del self._entries[label]
        return True

    def expire(self, now):
        for label in list(self._entries):
            bucket = self._entries[label]
            for addr in [a for a, (_, exp) in bucket.items() if exp <= now]:
                del bucket[addr]
            if not bucket:
                del self._entries[label]

    def members(self, label, now) -> list:
        bucket = self._entries.get(label, {})
        return [n for addr, (n, exp) in sorted(bucket.items()) if exp > now]

    def labels(self):
        return sorted(self._entries)

    def export(self, now, labels=None):
        out = []
        for label in sorted(self._entries):
            if labels is not None and label not in labels:
                continue
            for addr, (n, exp) in sorted(self._entries[label].items()):
                if exp > now:
                    out.append({"label": label, "node": n.to_json(), "lease": exp - now})
        return out

    def pop_labels(self, labels):
        for label in labels:
            self._entries.pop(label, None)

    def __len__(self):
        return sum(len(b) for b in self._entries.values())


# -- distributed execution ---------------------------------------------------

class DistributedQueryError(Exception):
    def __init__(self, message, unreachable=()):
        super().__init__(message)
        self.unreachable = list(unreachable)


class BroadcastDisabled(DistributedQueryError):
    pass


class PartialResult(NamedTuple):
    results: ResultSet
    status: dict


class Gather:
    """Replies for one fan-out, correlated by ``corr``."""

    def __init__(self, corr, first, label=""):
        self.corr = corr
        self.label = label
        self.announced = {first}
        self.replies = {}
        self.errors = []
        self.future = Future()
        self.timer = None

    def add(self, sender, forwarded, body):
        self.replies[sender] = body
        self.announced.update(forwarded)
        if body.get("error"):
            self.errors.append(f"{sender}: {body['error']}")
        if self.announced <= set(self.replies):
            if self.timer is not None:
                self.timer.cancel()
            self.future.set_result(self.replies)

    @property
    def missing(self):
        return sorted(self.announced - set(self.replies))


FANOUT_REPLY = {
    MessageType.SUBQUERY: MessageType.SUBQUERY_RESULT,
    MessageType.SUBSCRIBE: MessageType.SUB_ACK,
    MessageType.RENEW_SUB: MessageType.SUB_ACK,
    MessageType.UNSUBSCRIBE: MessageType.SUB_ACK,
}


class FanoutTimeout(Exception):
    def __init__(self, label, missing, replies=None):
        super().__init__(f"cluster {label}: no reply from {', '.join(missing)}")
        self.label = label
        self.missing = missing
        self.replies = replies or {}


class SemanticLayer:
    def __init__(self, peer):
        self.peer = peer
        self.cfg = peer.config
        self.registry = ClusterRegistry()
        self.gathers = {}
        self._corr = itertools.count(1)
        self._wanted = {}
        self._gen = itertools.count(1)
        self.registered = {}
        self.last_query = {}
        self.queries = 0

    @property
    def ring(self):
        return self.peer.ring

    def label_prefix(self, label) -> int:
        return cluster_prefix(label, self.cfg.prefix_bits)

    def label_key(self, label) -> int:
        return arc_key(label, self.cfg.prefix_bits)

    # -- fan-out (shared by queries and subscriptions) ------------------------

    def fan_out(self, kind, label, body, timeout, broadcast=False):
        """Coroutine: deliver ``body`` to the arc of ``label`` plus its registry.

        With ``broadcast`` the message walks the whole ring from this node.
        Returns ``(replies_by_address, lookup_hops)``.
        """
        if broadcast:
            head, hops = self.ring.me, 0
        else:
            head, hops = yield from self.ring.find_successor(self.label_key(label))
        corr = f"{self.peer.address}#{next(self._corr)}"
        g = Gather(corr, head.address, label)
        self.gathers[corr] = g
        g.timer = self.peer.call_later(timeout, self._expire_gather, corr)
        payload = {"corr": corr, "origin": self.peer.address, "head": head.to_json(),
                   "mode": "ring" if broadcast else "arc", "label": label,
                   "prefix": 0 if broadcast else self.label_prefix(label), "body": body}
        self.peer.send(head.address, kind, payload, ttl=self.cfg.walk_ttl)
        try:
            replies = yield g.future
        finally:
            self.gathers.pop(corr, None)
        return replies, hops

    def _expire_gather(self, corr):
        g = self.gathers.get(corr)
        if g is not None and not g.future.done():
            g.future.set_exception(FanoutTimeout(g.label, g.missing, dict(g.replies)))

    def on_fanout(self, msg, local):
        """Handle one fan-out delivery: run ``local``, forward, reply to origin."""
        p = msg.payload
        if p["mode"] == "adopt":
            local(p)
            return
        head = NodeRef.from_json(p["head"])
        me = self.ring.me
        targets = []
        succ = self.ring.successor
        if p["mode"] == "ring":
            if succ.address != p["origin"] and succ.address != me.address:
                targets.append(succ)
        else:
            prefix = p["prefix"]
            if succ.address not in (me.address, head.address) and \
                    prefix_of(succ.id, self.cfg.prefix_bits) == prefix:
                targets.append(succ)
            if me.address == head.address:
                for n in self.registry.members(p["label"], self.peer.now()):
                    if n.address != me.address and all(n.address != t.address for t in targets):
                        targets.append(n)
        body = local(p)
        if p["mode"] == "arc" and me.address == head.address:
            pred = self.ring.predecessor
            key = p["prefix"] << (64 - self.cfg.prefix_bits)
            if pred is not None and not in_interval(key, pred.id, me.id):
                # reached through a detour around unreachable nodes
                body = dict(body, error="not the arc head")
        forwarded = []
        if targets:
            if msg.ttl <= 1:
                body = dict(body, error="walk ttl exhausted")
            else:
                for t in targets:
                    self.peer.send(t.address, msg.type, p, ttl=msg.ttl - 1)
                    forwarded.append(t.address)
        self.peer.send(p["origin"], FANOUT_REPLY[msg.type],
                       {"corr": p["corr"], "from": me.address, "forwarded": forwarded,
                        "body": body})

    def on_fanout_reply(self, msg):
        p = msg.payload
        g = self.gathers.get(p["corr"])
        if g is None or g.future.done():
            return
        g.add(p["from"], [a for a in p["forwarded"] if isinstance(a, str)], p["body"])

    # -- queries --------------------------------------------------------------

    def evaluate_patterns(self, p):
        patterns = [pattern_from_json(x) for x in p["body"]["patterns"]]
        return {"results": [pattern_results(self.peer.store, pat).to_json() for pat in patterns]}

    def on_subquery(self, msg):
        self.on_fanout(msg, self.evaluate_patterns)

    def execute_distributed(self, q: Query, partial_ok=None, allow_broadcast=None):
        """Coroutine: scatter per-cluster subqueries, join partials at the origin."""
        partial_ok = self.cfg.partial_ok if partial_ok is None else partial_ok
        allow_broadcast = self.cfg.allow_broadcast if allow_broadcast is None else allow_broadcast
        subs = decompose(q, self.peer.mapping)
        if any(s.broadcast for s in subs) and not allow_broadcast:
            raise BroadcastDisabled("variable-predicate patterns need allow_broadcast")
        self.queries += 1

        def one(sub):
            body = {"patterns": [pattern_to_json(p) for p in sub.patterns]}
            return (yield from self.fan_out(MessageType.SUBQUERY, sub.label, body,
                                            self.cfg.subquery_timeout, broadcast=sub.broadcast))

        outcomes = yield gather(spawn(one(s), "subquery") for s in subs)
        per_pattern = [None] * len(q.patterns)
        status, unreachable, stats = {}, [], {"hops": 0, "visited": 0, "subqueries": len(subs)}
        for sub, (ok, value) in zip(subs, outcomes):
            if not ok:
                if not isinstance(value, (FanoutTimeout, RoutingError, RpcTimeout)):
                    raise value
                status[sub.label] = f"unreachable: {value}"
                unreachable.append(sub.label)
                for i, p in zip(sub.indices, sub.patterns):
                    per_pattern[i] = ResultSet([v.name for v in p.variables])
                continue
            replies, hops = value
            stats["hops"] += hops
            stats["visited"] += len(replies)
            errors = [f"{a}: {b['error']}" for a, b in sorted(replies.items()) if b.get("error")]
            if errors:
                status[sub.label] = "error: " + "; ".join(errors)
                unreachable.append(sub.label)
            else:
                status[sub.label] = "ok"
            for k, (i, p) in enumerate(zip(sub.indices, sub.patterns)):
                acc = ResultSet([v.name for v in p.variables])
                for addr in sorted(replies):
                    results = replies[addr].get("results")
                    if results is not None:
                        acc = acc.union(ResultSet.from_json(results[k]))
                per_pattern[i] = acc
        self.last_query = stats
        if unreachable and not partial_ok:
            raise DistributedQueryError(
                "unreachable clusters: " + ", ".join(unreachable), unreachable)
        rs = ResultSet.unit()
        for part in per_pattern:
            rs = join_bindings(rs, part)
        result = finish(q, rs)
        return PartialResult(result, status) if partial_ok else result

    # -- registration (producer side) -----------------------------------------

    def wanted_labels(self):
        """Labels held locally whose arc is not this node's own arc."""
        own = prefix_of(self.ring.me.id, self.cfg.prefix_bits)
        return sorted(label for label, n in self.peer.store.stats().items()
                      if n and self.label_prefix(label) != own)

    def sync_registrations(self):
        if not self.ring.joined:
            return
        wanted = set(self.wanted_labels())
        for label in sorted(wanted - set(self._wanted)):
            gen = next(self._gen)
            self._wanted[label] = gen
            self.peer.pubsub.begin_pending(label)
            background(self._register_loop(label, gen), f"register {label}")
        for label in sorted(set(self._wanted) - wanted):
            del self._wanted[label]
            self.peer.pubsub.drop_pending(label)
            self.registered.pop(label, None)
            background(self._deregister(label), f"deregister {label}",
                       (RpcTimeout, RoutingError))

    def _register_loop(self, label, gen):
        backoff = self.cfg.register_backoff
        kind = MessageType.REGISTER
        while self._wanted.get(label) == gen and self.ring.joined:
            try:
                head, _ = yield from self.ring.find_successor(self.label_key(label))
                ack = yield self.peer.rpc(head.address, kind, {
                    "label": label, "node": self.ring.me.to_json(), "lease": self.cfg.lease})
            except (RpcTimeout, RoutingError):
                yield self.peer.sleep(backoff)
                backoff = min(backoff * 2, self.cfg.register_backoff_cap)
                continue
            if self._wanted.get(label) != gen:
                return
            self.registered[label] = head.address
            subs = ack.payload.get("subs")
            self.peer.pubsub.settle_pending(label, subs if isinstance(subs, list) else [])
            kind = MessageType.RENEW
            backoff = self.cfg.register_backoff
            yield from self._watch_head(label, gen, head)

    def _watch_head(self, label, gen, head):
        """Sleep until the renew half-life, returning early if the head dies."""
        waited, half = 0, self.cfg.lease // 2
        step = min(self.cfg.head_check_period, half)
        misses = 0
        while waited < half and self._wanted.get(label) == gen:
            yield self.peer.sleep(step)
            waited += step
            if head.address == self.ring.me.address:
                continue
            try:
                yield self.peer.rpc(head.address, MessageType.PING, {})
                misses = 0
            except RpcTimeout:
                misses += 1
                if misses >= self.cfg.fail_after:
                    return

    def _deregister(self, label):
        head, _ = yield from self.ring.find_successor(self.label_key(label))
        self.peer.send(head.address, MessageType.DEREGISTER,
                       {"label": label, "node": self.ring.me.to_json()})

    def renew_now(self):
        """Restart registration loops, e.g. after an arc head change."""
        for label in list(self._wanted):
            gen = next(self._gen)
            self._wanted[label] = gen
            background(self._register_loop(label, gen), f"register {label}")

    # -- registration (arc head side) -----------------------------------------

    def on_register(self, msg):
        p = msg.payload
        node = NodeRef.from_json(p["node"])
        lease = int(p["lease"])
        if lease <= 0:
            raise ValueError("lease must be positive")
        self.registry.upsert(p["label"], node, self.peer.now() + lease)
        if not p.get("handoff"):
            self.peer.reply(msg, MessageType.REGISTER_ACK, {
                "label": p["label"], "subs": self.peer.pubsub.export_label(p["label"])})

    def on_deregister(self, msg):
        p = msg.payload
        node = NodeRef.from_json(p["node"])
        self.registry.remove(p["label"], node.address)

    def expire(self):
        self.registry.expire(self.peer.now())

    def transfer_to_predecessor(self, pred: NodeRef):
        """Hand registry entries whose arc key now belongs to ``pred``."""
        me = self.ring.me
        moved = [label for label in self.registry.labels()
                 if not in_interval(self.label_key(label), pred.id, me.id)]
        now = self.peer.now()
        for e in self.registry.export(now, set(moved)):
            self.peer.send(pred.address, MessageType.REGISTER, dict(e, handoff=True))
        self.registry.pop_labels(moved)
        return moved

    def audit_registry(self):
        """Re-home entries whose arc key this node no longer owns."""
        pred, me = self.ring.predecessor, self.ring.me
        if pred is None or not self.ring.joined:
            return []
        stray = [label for label in self.registry.labels()
                 if not in_interval(self.label_key(label), pred.id, me.id)]
        for label in stray:
            background(self._rehome(label), f"rehome {label}", (RpcTimeout, RoutingError))
        return stray

    def _rehome(self, label):
        head, _ = yield from self.ring.find_successor(self.label_key(label))
        if head.address == self.ring.me.address:
            return
        now = self.peer.now()
        for e in self.registry.export(now, {label}):
            self.peer.send(head.address, MessageType.REGISTER, dict(e, handoff=True))
        self.registry.pop_labels([label])
        self.peer.pubsub.push_to_registrant(label, head)

    def export_registry(self):
        return self.registry.export(self.peer.now())

    def adopt_registry(self, entries):
        now = self.peer.now()
        for e in entries:
            if e["lease"] > 0:
                self.registry.upsert(e["label"], NodeRef.from_json(e["node"]), now + e["lease"])
