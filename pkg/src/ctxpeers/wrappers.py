"""Sensor wrappers: poll virtual sensors and turn readings into triples.

A source answers ``next(now)`` with one due :class:`Reading` or ``None``.
The owning node ticks each attached wrapper on its own timer; a tick
drains every due reading and applies it either as a functional replace
(one current value per entity/attribute) or as a plain insert.
"""

from __future__ import annotations

import csv
import itertools
import random
from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol

from .store import ChangeSet, ContractError
from .terms import Iri, Literal, Triple, ValidationError

FUNCTIONAL = "functional"
ACCUMULATE = "accumulate"

PLAYBACK_HEADER = ["t", "entity", "attribute", "value", "datatype"]


class Reading(NamedTuple):
    entity: Iri
    attribute: Iri
    value: Literal


class SensorSource(Protocol):
    def next(self, now: int) -> Optional[Reading]:
        ...


def _iri(text):
    text = text.strip()
    if text.startswith("<") and text.endswith(">"):
        text = text[1:-1]
    return Iri(text)


class PlaybackSource:
    """Replays ``(t, entity, attribute, value, datatype)`` rows.

    Row times are milliseconds relative to when the wrapper is attached.
    """

    def __init__(self, rows=()):
        self.rows = sorted(rows, key=lambda r: r[0])
        self._i = 0
        self._origin = 0

    @classmethod
    def from_lines(cls, lines):
        reader = csv.reader(lines)
        rows = []
        header = None
        for lineno, rec in enumerate(reader, 1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            if header is None:
                header = [h.strip() for h in rec]
                if header != PLAYBACK_HEADER:
                    raise ValidationError(
                        f"line {lineno}: header must be {','.join(PLAYBACK_HEADER)}")
                continue
            if len(rec) != 5:
                raise ValidationError(f"line {lineno}: expected 5 fields, got {len(rec)}")
            t, entity, attribute, value, datatype = (f.strip() for f in rec)
            try:
                t = int(t)
                if t < 0:
                    raise ValueError("negative time")
                row = (t, _iri(entity), _iri(attribute), Literal(value, datatype or "string"))
            except (ValueError, ValidationError) as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            rows.append(row)
        return cls(rows)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.from_lines(fh)

    @property
    def attributes(self):
        return {r[2] for r in self.rows}

    def reset(self, now):
        self._origin = now
        self._i = 0

    def next(self, now):
        if self._i < len(self.rows) and self.rows[self._i][0] + self._origin <= now:
            _, entity, attribute, value = self.rows[self._i]
            self._i += 1
            return Reading(entity, attribute, value)
        return None


def playback_source(path) -> PlaybackSource:
    return PlaybackSource.load(path)


class RandomWalkSource:
    """Bounded random walk, one reading per distinct tick time.

    ``value[k+1] = clamp(value[k] +/- step * u)`` with ``u`` uniform in
    [0, 1] and the sign from a fair coin, both drawn from ``seed``.
    """

    def __init__(self, seed, entity, attribute, start, step, low, high, digits=3):
        if not low <= start <= high:
            raise ValueError(f"start {start} outside [{low}, {high}]")
        if step < 0:
            raise ValueError("step must be non-negative")
        self.rng = random.Random(seed)
        self.entity = entity if isinstance(entity, Iri) else _iri(entity)
        self.attribute = attribute if isinstance(attribute, Iri) else _iri(attribute)
        self.low, self.high, self.step = float(low), float(high), float(step)
        self.value = float(start)
        self.digits = digits
        self._last = None
        self._started = False

    @property
    def attributes(self):
        return {self.attribute}

    def advance(self) -> float:
        if self._started:
            sign = 1.0 if self.rng.random() < 0.5 else -1.0
            self.value = min(self.high, max(self.low, self.value + sign * self.step * self.rng.random()))
        self._started = True
        return self.value

    def next(self, now):
        if self._last == now:
            return None
        self._last = now
        v = self.advance()
        return Reading(self.entity, self.attribute, Literal(f"{v:.{self.digits}f}", "decimal"))


def randomwalk_source(seed, entity, attribute, start, step, low, high) -> RandomWalkSource:
    return RandomWalkSource(seed, entity, attribute, start, step, low, high)


@dataclass
class WrapperBinding:
    source: object
    period: int
    mode: str = FUNCTIONAL

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("wrapper period must be positive")
        if self.mode not in (FUNCTIONAL, ACCUMULATE):
            raise ValueError(f"unknown wrapper mode {self.mode!r}")


class WrapperSet:
    """Attached wrappers of one node.

    ``on_change`` receives the net ChangeSet of every tick that changed
    the store; ``errors`` counts skipped malformed readings.
    """

    def __init__(self, store, on_change=None):
        self.store = store
        self.on_change = on_change
        self.bindings = {}
        self.errors = 0
        self._ids = itertools.count(1)

    def attach(self, binding: WrapperBinding, now: int = 0) -> int:
        if binding.mode == FUNCTIONAL:
            mapping = self.store.mapping
            for attr in sorted(getattr(binding.source, "attributes", ()), key=str):
                if mapping is None or not mapping.is_functional(attr):
                    raise ContractError(
                        f"functional wrapper on non-functional attribute {attr.value}")
        if hasattr(binding.source, "reset"):
            binding.source.reset(now)
        handle = next(self._ids)
        self.bindings[handle] = binding
        return handle

    def detach(self, handle) -> None:
        self.bindings.pop(handle, None)

    def tick(self, handle, now) -> ChangeSet:
        binding = self.bindings.get(handle)
        if binding is None:
            raise KeyError(f"no wrapper {handle}")
        added, removed = [], []
        while True:
            reading = binding.source.next(now)
            if reading is None:
                break
            try:
                entity, attribute, value = reading
                if not isinstance(value, Literal):
                    raise ValidationError(f"reading value {value!r} is not a literal")
                if binding.mode == FUNCTIONAL:
                    cs = self.store.replace_functional(entity, attribute, value)
                else:
                    cs = self.store.insert_change(Triple(entity, attribute, value))
            except (ValidationError, ContractError, TypeError, ValueError):
                self.errors += 1
                continue
            for t in cs.removed:
                if t in added:
                    added.remove(t)
                else:
                    removed.append(t)
            for t in cs.added:
                if t in removed:
                    removed.remove(t)
                else:
                    added.append(t)
        net = ChangeSet(added, removed, self.store.clock)
        if net and self.on_change is not None:
            self.on_change(net)
        return net
