"""Deterministic discrete-event network simulator.

One global integer-millisecond clock and a single event heap ordered by
``(time, sequence)``.  Latency, drop coins and everything else random come
from one seeded generator, so equal seeds and equal inputs give equal
event logs.  The simulator doubles as the runtime of every simulated peer.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from collections import Counter
from dataclasses import dataclass, field

from .codec import FrameError, Message, decode, encode


@dataclass
class SimConfig:
    seed: int = 0
    latency: object = 10          # int, or (lo, hi) for uniform per message
    drop_probability: float = 0.0
    partitions: list = field(default_factory=list)
    codec: bool = False           # round-trip every message through the wire codec
    keep_log: bool = True

    def __post_init__(self):
        if isinstance(self.latency, (list, tuple)):
            lo, hi = self.latency
            if not 0 <= lo <= hi:
                raise ValueError(f"latency range [{lo}, {hi}] invalid")
            self.latency = (int(lo), int(hi))
        elif int(self.latency) < 0:
            raise ValueError("latency must be non-negative")
        if not 0.0 <= self.drop_probability < 1.0 and self.drop_probability != 1.0:
            raise ValueError("drop_probability must be in [0, 1]")
        for p in self.partitions:
            if p.get("action") not in ("cut", "heal"):
                raise ValueError(f"partition action must be cut or heal: {p!r}")


class TimerHandle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class Simulator:
    """Event heap, seeded network model and per-address handler table."""

    def __init__(self, config: SimConfig = None):
        self.config = config or SimConfig()
        self.seed = self.config.seed
        self.rng = random.Random(self.config.seed)
        self.clock = 0
        self._heap = []
        self._seq = itertools.count()
        self.handlers = {}
        self.cuts = []
        self.log = []
        self.metrics = Counter()
        self.drops = Counter()
        self.by_type = Counter()
        self.in_flight = 0
        for p in self.config.partitions:
            self.call_at(int(p["at"]), self._partition, p)

    # -- runtime interface ----------------------------------------------------

    def now(self) -> int:
        return self.clock

    def call_at(self, when, fn, *args) -> TimerHandle:
        handle = TimerHandle()
        heapq.heappush(self._heap, (max(when, self.clock), next(self._seq), handle, fn, args))
        return handle

    def call_later(self, delay, fn, *args) -> TimerHandle:
        return self.call_at(self.clock + int(delay), fn, *args)

    def defer(self, fn, *args):
        self.call_at(self.clock, fn, *args)

    def register(self, address, handler):
        self.handlers[address] = handler

    def unregister(self, address):
        self.handlers.pop(address, None)

    def transmit(self, msg: Message):
        """Enqueue ``msg`` unless the drop coin or a partition eats it."""
        self.metrics["sent"] += 1
        self.by_type[msg.type.value] += 1
        if self.config.codec:
            msg = decode(encode(msg))
        if self._cut(msg.src, msg.dst):
            self._drop(msg, "partition")
            return
        p = self.config.drop_probability
        if p and self.rng.random() < p:
            self._drop(msg, "coin")
            return
        lat = self.config.latency
        delay = self.rng.randint(*lat) if isinstance(lat, tuple) else lat
        self.in_flight += 1
        self.call_later(delay, self._deliver, msg)

    # -- internals ------------------------------------------------------------

    def _record(self, line):
        if self.config.keep_log:
            self.log.append(f"{self.clock} {line}")

    def _drop(self, msg, reason):
        self.metrics["dropped"] += 1
        self.drops[reason] += 1
        self._record(f"drop[{reason}] {msg.type.value} {msg.src}>{msg.dst} #{msg.msg_id}")

    def _deliver(self, msg):
        self.in_flight -= 1
        handler = self.handlers.get(msg.dst)
        if handler is None:
            self._drop(msg, "unknown")
            return
        self.metrics["delivered"] += 1
        self._record(f"recv {msg.type.value} {msg.src}>{msg.dst} #{msg.msg_id}")
        handler(msg)

    def _cut(self, a, b):
        for left, right in self.cuts:
            if (a in left and b in right) or (a in right and b in left):
                return True
        return False

    def _partition(self, p):
        pair = (frozenset(p["a"]), frozenset(p["b"]))
        if p["action"] == "cut":
            self.cuts.append(pair)
        else:
            self.cuts = [c for c in self.cuts if c != pair and c != pair[::-1]]
        self._record(f"{p['action']} {','.join(sorted(pair[0]))}|{','.join(sorted(pair[1]))}")

    def cut(self, a, b):
        self._partition({"action": "cut", "a": a, "b": b})

    def heal(self, a, b):
        self._partition({"action": "heal", "a": a, "b": b})

    # -- driving --------------------------------------------------------------

    def step(self) -> bool:
        """Run the next live event; False when the heap is empty."""
        while self._heap:
            when, _, handle, fn, args = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.clock = when
            fn(*args)
            return True
        return False

    def run_until(self, t):
        """Run every event due at or before ``t`` and leave the clock at ``t``."""
        heap = self._heap
        while heap and heap[0][0] <= t:
            when, _, handle, fn, args = heapq.heappop(heap)
            if handle.cancelled:
                continue
            self.clock = when
            fn(*args)
        self.clock = max(self.clock, t)

    def run_for(self, duration):
        self.run_until(self.clock + duration)

    def run_until_done(self, future, limit=600_000, quantum=10):
        """Advance until ``future`` resolves or ``limit`` ms elapse."""
        deadline = self.clock + limit
        while not future.done() and self.clock < deadline:
            self.run_until(min(deadline, self.clock + quantum))
        return future.done()

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.log).encode("utf-8")).hexdigest()

    def report(self) -> dict:
        return {
            "time": self.clock,
            "sent": self.metrics["sent"],
            "delivered": self.metrics["delivered"],
            "dropped": self.metrics["dropped"],
            "in_flight": self.in_flight,
            "drops": dict(sorted(self.drops.items())),
            "by_type": dict(sorted(self.by_type.items())),
        }


__all__ = ["SimConfig", "Simulator", "TimerHandle", "FrameError"]
