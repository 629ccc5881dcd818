"""One-dimensional ring overlay with semantic-cluster ID prefixes.

Node IDs are 64-bit points whose top ``prefix_bits`` bits come from the
hash of the node's dominant cluster label, so nodes holding semantically
similar data occupy one contiguous arc.  Maintenance is Chord-style:
periodic stabilize/notify, round-robin finger repair, a successor list
for failover and iterative lookups.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

from .net.codec import MessageType
from .tasks import background

log = logging.getLogger(__name__)

ID_BITS = 64
RING = 1 << ID_BITS
MASK = RING - 1
PREFIX_BITS = 16

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211


class RoutingError(Exception):
    """A lookup exhausted its hop budget or found no live successor."""


class JoinError(Exception):
    pass


class JoinCollision(JoinError):
    """Another live node already owns the joining node's ID."""


class RpcTimeout(Exception):
    def __init__(self, dst, kind):
        super().__init__(f"{kind} to {dst} timed out")
        self.dst = dst
        self.kind = kind


def hash64(data) -> int:
    """FNV-1a, 64-bit."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK
    return h


def mix64(h: int) -> int:
    """splitmix64 finalizer; spreads FNV's weak avalanche on short inputs."""
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & MASK
    return h ^ (h >> 31)


def in_interval(x: int, a: int, b: int, closed_right: bool = True) -> bool:
    """Is ``x`` in the circular interval (a, b] (or (a, b))?

    When ``a == b`` the interval is the whole ring, minus ``a`` itself when
    open on the right.
    """
    x, a, b = x & MASK, a & MASK, b & MASK
    if a == b:
        return closed_right or x != a
    if a < b:
        return a < x < b or (closed_right and x == b)
    return x > a or x < b or (closed_right and x == b)


def distance(a: int, b: int) -> int:
    """Clockwise distance from a to b."""
    return (b - a) & MASK


def cluster_prefix(label: str, prefix_bits: int = PREFIX_BITS) -> int:
    return hash64(label) >> (ID_BITS - prefix_bits)


def arc_key(label: str, prefix_bits: int = PREFIX_BITS) -> int:
    """First ring point of a cluster's arc; its successor is the arc head."""
    return cluster_prefix(label, prefix_bits) << (ID_BITS - prefix_bits)


def prefix_of(node_id: int, prefix_bits: int = PREFIX_BITS) -> int:
    return node_id >> (ID_BITS - prefix_bits)


def make_node_id(label: str, address: str, prefix_bits: int = PREFIX_BITS) -> int:
    suffix_bits = ID_BITS - prefix_bits
    suffix = mix64(hash64(address)) >> prefix_bits
    return (cluster_prefix(label, prefix_bits) << suffix_bits) | suffix


def elect_dominant(stats: dict, default: str = "Misc") -> str:
    """Label with the most triples; ties go to the lexicographically smallest."""
    if not stats:
        return default
    return min(stats, key=lambda label: (-stats[label], label))


@dataclass(frozen=True)
class NodeRef:
    id: int
    address: str

    def to_json(self):
        return {"id": self.id, "address": self.address}

    @classmethod
    def from_json(cls, obj):
        if obj is None:
            return None
        node_id, address = obj["id"], obj["address"]
        if not isinstance(node_id, int) or isinstance(node_id, bool) or not 0 <= node_id < RING:
            raise ValueError(f"bad node id {node_id!r}")
        if not isinstance(address, str):
            raise ValueError(f"bad address {address!r}")
        return cls(node_id, address)

    def __str__(self):
        return f"{self.address}@{self.id:016x}"


class RoutingState:
    """Predecessor, successor list and finger table of one node."""

    def __init__(self, me: NodeRef, r: int = 4):
        self.me = me
        self.r = r
        self.predecessor = None
        self.successors = []
        self.fingers = [None] * ID_BITS

    @property
    def successor(self) -> NodeRef:
        return self.successors[0] if self.successors else self.me

    def set_successors(self, nodes):
        """Keep the given ring order; stop where the list wraps back to us.

        Not sorted by distance: a successor's own list can still name a
        failed node that would sort ahead of the live successor.
        """
        out = []
        for n in nodes:
            if n is None:
                continue
            if n.address == self.me.address:
                break
            if any(o.address == n.address for o in out):
                continue
            out.append(n)
        self.successors = out[:self.r]

    def forget(self, address):
        """Drop every reference to a failed or departed node."""
        self.successors = [n for n in self.successors if n.address != address]
        self.fingers = [None if f is not None and f.address == address else f
                        for f in self.fingers]
        if self.predecessor is not None and self.predecessor.address == address:
            self.predecessor = None

    def known(self):
        seen = {}
        for n in list(self.successors) + [f for f in self.fingers if f is not None]:
            seen.setdefault(n.address, n)
        return list(seen.values())

    def closest_preceding(self, x: int, exclude=()) -> NodeRef:
        """Known node whose id lies in (me, x) closest to x, else me."""
        best, best_d = self.me, 0
        for n in self.known():
            if n.address in exclude or n.address == self.me.address:
                continue
            if in_interval(n.id, self.me.id, x, closed_right=False):
                d = distance(self.me.id, n.id)
                if d > best_d:
                    best, best_d = n, d
        return best

    def next_hop(self, x: int, exclude=()):
        """``(True, successor_of_x)`` if resolvable here, else ``(False, next_node)``."""
        live = [n for n in self.successors if n.address not in exclude]
        succ = live[0] if live else self.me
        if in_interval(x, self.me.id, succ.id):
            return True, succ
        pred = self.predecessor
        if pred is not None and pred.address not in exclude and \
                in_interval(x, pred.id, self.me.id):
            return True, self.me
        # consecutive successor-list entries bracket x: answer directly
        for a, b in zip(live, live[1:]):
            if in_interval(x, a.id, b.id):
                return True, b
        nxt = self.closest_preceding(x, exclude)
        if nxt.address == self.me.address:
            return True, succ
        return False, nxt


class RingProtocol:
    """Overlay construction, maintenance and lookup for one peer.

    ``peer`` supplies ``rpc``, ``send``, ``reply``, ``call_later``, ``now``,
    ``config`` and the hooks ``on_predecessor_changed``,
    ``on_successor_changed``, ``handoff_payload`` and ``adopt_handoff``.
    """

    def __init__(self, peer, me: NodeRef):
        self.peer = peer
        self.cfg = peer.config
        self.state = RoutingState(me, peer.config.successors)
        self.next_finger = 0
        self.misses = {}
        self.joined = False
        self.lookups = 0
        self.hop_hist = Counter()

    @property
    def me(self):
        return self.state.me

    @property
    def successor(self):
        return self.state.successor

    @property
    def predecessor(self):
        return self.state.predecessor

    def alone(self):
        return self.state.successor.address == self.me.address

    # -- lookup ---------------------------------------------------------------

    def find_successor(self, x: int):
        """Coroutine: iterative lookup of the live node owning point ``x``.

        Returns ``(node, hops)`` where hops counts remote routing steps.
        """
        x &= MASK
        exclude = set()
        done, node = self.state.next_hop(x, exclude)
        if done:
            self._record(0)
            return node, 0
        hops = 0
        trail = []
        while True:
            if hops >= self.cfg.ttl:
                raise RoutingError(f"lookup of {x:016x} exceeded {self.cfg.ttl} hops")
            try:
                reply = yield self.peer.rpc(node.address, MessageType.GET_SUCCESSOR,
                                            {"target": x, "exclude": sorted(exclude)})
            except RpcTimeout:
                hops += 1
                exclude.add(node.address)
                if trail:
                    node = trail.pop()
                else:
                    done, node = self.state.next_hop(x, exclude)
                    if done:
                        if node.address in exclude:
                            raise RoutingError("no live successor") from None
                        self._record(hops)
                        return node, hops
                continue
            hops += 1
            found = NodeRef.from_json(reply.payload["node"])
            if reply.payload["done"]:
                self._record(hops)
                return found, hops
            trail.append(node)
            node = found

    def _record(self, hops):
        self.lookups += 1
        self.hop_hist[hops] += 1

    def on_get_successor(self, msg):
        exclude = set(msg.payload["exclude"])
        done, node = self.state.next_hop(int(msg.payload["target"]), exclude)
        self.peer.reply(msg, MessageType.SUCCESSOR_IS, {"done": done, "node": node.to_json()})

    # -- join / leave ---------------------------------------------------------

    def create(self):
        """Found a new ring."""
        self.state.predecessor = None
        self.state.successors = []
        self.joined = True

    def join(self, bootstrap: str):
        """Coroutine: join through ``bootstrap`` and run one stabilization."""
        reply = yield self.peer.rpc(bootstrap, MessageType.JOIN_REQ, {"node": self.me.to_json()},
                                    timeout=self.cfg.join_timeout)
        err = reply.payload.get("error")
        if err == "collision":
            raise JoinCollision(f"node id {self.me.id:016x} already in use")
        if err:
            raise JoinError(err)
        succ = NodeRef.from_json(reply.payload["successor"])
        self.state.set_successors([succ])
        self.joined = True
        yield from self.stabilize()
        return succ

    def on_join_req(self, msg):
        newcomer = NodeRef.from_json(msg.payload["node"])

        def serve():
            try:
                succ, _ = yield from self.find_successor(newcomer.id)
            except RoutingError as exc:
                self.peer.reply(msg, MessageType.JOIN_ACK, {"error": str(exc)})
                return
            if succ.id == newcomer.id and succ.address != newcomer.address:
                self.peer.reply(msg, MessageType.JOIN_ACK, {"error": "collision"})
                return
            if succ.address == newcomer.address:
                # stale entry of a restarted node: skip past it
                try:
                    succ, _ = yield from self.find_successor(newcomer.id + 1)
                except RoutingError as exc:
                    self.peer.reply(msg, MessageType.JOIN_ACK, {"error": str(exc)})
                    return
            self.peer.reply(msg, MessageType.JOIN_ACK, {"successor": succ.to_json()})

        background(serve(), "join-serve", (RpcTimeout, RoutingError))

    def leave(self):
        """Graceful departure: hand state to the successor, relink the predecessor."""
        succ, pred = self.state.successor, self.state.predecessor
        if succ.address != self.me.address:
            payload = {"role": "successor", "node": self.me.to_json(),
                       "predecessor": pred.to_json() if pred else None}
            payload.update(self.peer.handoff_payload())
            self.peer.send(succ.address, MessageType.LEAVE_HANDOFF, payload)
        if pred is not None and pred.address != self.me.address:
            self.peer.send(pred.address, MessageType.LEAVE_HANDOFF, {
                "role": "predecessor", "node": self.me.to_json(),
                "successors": [n.to_json() for n in self.state.successors]})
        self.joined = False

    def on_leave_handoff(self, msg):
        p = msg.payload
        leaving = NodeRef.from_json(p["node"])
        if p["role"] == "successor":
            old = self.state.predecessor
            self.state.forget(leaving.address)
            new_pred = NodeRef.from_json(p.get("predecessor"))
            if new_pred is not None and new_pred.address != self.me.address:
                self.state.predecessor = new_pred
            elif new_pred is not None:
                self.state.predecessor = None
            if self.state.predecessor != old:
                self.peer.on_predecessor_changed(old, self.state.predecessor)
            self.peer.adopt_handoff(p)
        else:
            old = self.state.successor
            rest = [NodeRef.from_json(n) for n in p.get("successors", [])]
            self.state.forget(leaving.address)
            self.state.set_successors(rest + self.state.successors)
            if self.state.successor != old:
                self.peer.on_successor_changed(old, self.state.successor)

    # -- maintenance ----------------------------------------------------------

    def _missed(self, node: NodeRef) -> bool:
        """Count a missed reply; True once the node is declared failed."""
        n = self.misses.get(node.address, 0) + 1
        self.misses[node.address] = n
        if n >= self.cfg.fail_after:
            self.misses.pop(node.address, None)
            old = self.state.successor
            self.state.forget(node.address)
            if self.state.successor != old:
                self.peer.on_successor_changed(old, self.state.successor)
            return True
        return False

    def stabilize(self):
        """Coroutine: adopt a closer successor if one appeared, then notify it."""
        if not self.joined:
            return
        succ = self.state.successor
        if succ.address == self.me.address:
            pred = self.state.predecessor
            if pred is not None and pred.address != self.me.address:
                self.state.set_successors([pred])
                self.peer.on_successor_changed(self.me, pred)
                self.peer.send(pred.address, MessageType.NOTIFY, {"node": self.me.to_json()})
            return
        try:
            reply = yield self.peer.rpc(succ.address, MessageType.GET_PREDECESSOR, {})
        except RpcTimeout:
            self._missed(succ)
            return
        if not self.joined:
            return
        self.misses.pop(succ.address, None)
        x = NodeRef.from_json(reply.payload.get("predecessor"))
        theirs = [NodeRef.from_json(n) for n in reply.payload["successors"]]
        old = self.state.successor
        # the successor may have been replaced while we waited
        if old.address != succ.address:
            return
        candidates = [succ] + theirs
        if x is not None and x.address != self.me.address and \
                in_interval(x.id, self.me.id, succ.id, closed_right=False):
            candidates = [x] + candidates
        self.state.set_successors(candidates)
        if self.state.successor != old:
            self.peer.on_successor_changed(old, self.state.successor)
        self.peer.send(self.state.successor.address, MessageType.NOTIFY,
                       {"node": self.me.to_json()})

    def on_get_predecessor(self, msg):
        pred = self.state.predecessor
        self.peer.reply(msg, MessageType.PREDECESSOR_IS, {
            "predecessor": pred.to_json() if pred else None,
            "successors": [n.to_json() for n in self.state.successors]})

    def on_notify(self, msg):
        n = NodeRef.from_json(msg.payload["node"])
        if n.address == self.me.address or not self.joined:
            return
        pred = self.state.predecessor
        if pred is None or in_interval(n.id, pred.id, self.me.id, closed_right=False):
            self.state.predecessor = n
            self.misses.pop(n.address, None)
            if pred is None or pred.address != n.address:
                self.peer.on_predecessor_changed(pred, n)
        if self.alone():
            self.state.set_successors([n])
            self.peer.on_successor_changed(self.me, n)

    def check_predecessor(self):
        """Coroutine: ping the predecessor; clear it after repeated misses."""
        pred = self.state.predecessor
        if pred is None or not self.joined:
            return
        try:
            yield self.peer.rpc(pred.address, MessageType.PING, {})
        except RpcTimeout:
            n = self.misses.get(pred.address, 0) + 1
            self.misses[pred.address] = n
            if n >= self.cfg.fail_after and self.state.predecessor == pred:
                self.misses.pop(pred.address, None)
                self.state.predecessor = None
            return
        self.misses.pop(pred.address, None)

    def on_ping(self, msg):
        self.peer.reply(msg, MessageType.PONG, {})

    def fix_fingers(self):
        """Coroutine: refresh the next finger needing a remote lookup.

        Fingers whose target falls before the successor are filled in
        place; after a lookup, later fingers covered by the same result
        are filled too.
        """
        if not self.joined:
            return
        me = self.me.id
        for _ in range(ID_BITS):
            i = self.next_finger
            self.next_finger = (i + 1) % ID_BITS
            target = (me + (1 << i)) & MASK
            succ = self.state.successor
            if in_interval(target, me, succ.id):
                self.state.fingers[i] = succ
                continue
            node, _ = yield from self.find_successor(target)
            self.state.fingers[i] = node
            j = i + 1
            while j < ID_BITS:
                tj = (me + (1 << j)) & MASK
                if not in_interval(tj, target, node.id):
                    break
                self.state.fingers[j] = node
                j += 1
            self.next_finger = j % ID_BITS
            return

    # -- oracle helpers -------------------------------------------------------

    def snapshot(self):
        st = self.state
        return {"id": self.me.id, "address": self.me.address,
                "predecessor": st.predecessor.address if st.predecessor else None,
                "successors": [n.address for n in st.successors],
                "fingers": [f.address if f else None for f in st.fingers]}


def oracle_successor(ids, x: int) -> int:
    """Sorted-list successor of ``x`` among ``ids`` (global-view oracle)."""
    ordered = sorted(ids)
    for i in ordered:
        if i >= x:
            return i
    return ordered[0]


def ideal_ring(ids):
    """Map id -> (predecessor id, successor id) of the sorted circle."""
    ordered = sorted(ids)
    n = len(ordered)
    return {v: (ordered[(k - 1) % n], ordered[(k + 1) % n]) for k, v in enumerate(ordered)}


def arcs_contiguous(ids, prefix_bits: int = PREFIX_BITS) -> bool:
    """Nodes sharing a prefix form one contiguous run of the sorted circle."""
    ordered = sorted(ids)
    prefixes = [prefix_of(i, prefix_bits) for i in ordered]
    seen = set()
    for k, p in enumerate(prefixes):
        if k and p == prefixes[k - 1]:
            continue
        if p in seen:
            return False
        seen.add(p)
    return True


__all__ = [
    "NodeRef", "RoutingState", "RingProtocol", "RoutingError", "JoinError",
    "JoinCollision", "RpcTimeout", "hash64", "in_interval", "distance",
    "mix64", "cluster_prefix", "arc_key", "prefix_of", "make_node_id", "elect_dominant",
    "oracle_successor", "ideal_ring", "arcs_contiguous",
]
