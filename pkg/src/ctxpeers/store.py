"""Local context storage: an in-memory triple set with three hash indexes."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .terms import Iri, Term, Triple, TriplePattern, Variable, load_triples, dump_triples


class ContractError(Exception):
    """An operation was called outside its declared preconditions."""


@dataclass
class ChangeSet:
    added: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    timestamp: int = 0

    def __bool__(self):
        return bool(self.added or self.removed)

    def __len__(self):
        return len(self.added) + len(self.removed)

    def changes(self):
        """Yield ``(kind, triple)`` pairs, removals first."""
        for t in self.removed:
            yield "removed", t
        for t in self.added:
            yield "added", t


class TripleStore:
    """Set of triples indexed by subject, predicate and object.

    ``mapping`` (a :class:`~ctxpeers.semantic.ClusterMapping`) is needed for
    :meth:`replace_functional` and :meth:`stats`.  ``clock`` is a logical
    event counter bumped by every mutation that changes the store.
    """

    def __init__(self, triples: Iterable[Triple] = (), mapping=None):
        self.mapping = mapping
        self.clock = 0
        self._triples = set()
        self._by_s = defaultdict(set)
        self._by_p = defaultdict(set)
        self._by_o = defaultdict(set)
        for t in triples:
            self.insert(t)

    def __len__(self):
        return len(self._triples)

    def __contains__(self, t):
        return t in self._triples

    def __iter__(self):
        return iter(self._triples)

    def triples(self):
        return set(self._triples)

    def insert(self, t: Triple) -> bool:
        if not isinstance(t, Triple):
            raise TypeError(f"expected Triple, got {type(t).__name__}")
        if t in self._triples:
            return False
        self._triples.add(t)
        self._by_s[t.subject].add(t)
        self._by_p[t.predicate].add(t)
        self._by_o[t.object].add(t)
        self.clock += 1
        return True

    def remove(self, t: Triple) -> bool:
        if t not in self._triples:
            return False
        self._triples.discard(t)
        for index, key in ((self._by_s, t.subject), (self._by_p, t.predicate),
                           (self._by_o, t.object)):
            bucket = index[key]
            bucket.discard(t)
            if not bucket:
                del index[key]
        self.clock += 1
        return True

    def insert_change(self, t: Triple) -> ChangeSet:
        if self.insert(t):
            return ChangeSet(added=[t], timestamp=self.clock)
        return ChangeSet(timestamp=self.clock)

    def remove_change(self, t: Triple) -> ChangeSet:
        if self.remove(t):
            return ChangeSet(removed=[t], timestamp=self.clock)
        return ChangeSet(timestamp=self.clock)

    def candidates(self, pattern: TriplePattern):
        """Index selection: subject, then predicate, then object, else scan."""
        s, p, o = pattern
        if not isinstance(s, Variable):
            return self._by_s.get(s, ())
        if not isinstance(p, Variable):
            return self._by_p.get(p, ())
        if not isinstance(o, Variable):
            return self._by_o.get(o, ())
        return self._triples

    def match(self, pattern: TriplePattern) -> set:
        return {t for t in self.candidates(pattern) if pattern.matches(t)}

    def replace_functional(self, subject: Iri, predicate: Iri, new_object: Term) -> ChangeSet:
        """Overwrite the single value of a functional property.

        Raises ContractError unless the mapping declares ``predicate`` functional.
        """
        if self.mapping is None or not self.mapping.is_functional(predicate):
            raise ContractError(f"{predicate.value} is not declared functional")
        new = Triple(subject, predicate, new_object)
        old = self.match(TriplePattern(subject, predicate, Variable("o")))
        if old == {new}:
            return ChangeSet(timestamp=self.clock)
        cs = ChangeSet()
        for t in sorted(old - {new}, key=str):
            self.remove(t)
            cs.removed.append(t)
        if self.insert(new):
            cs.added.append(new)
        cs.timestamp = self.clock
        return cs

    def stats(self, mapping=None) -> dict:
        """Triple count per cluster label."""
        mapping = mapping or self.mapping
        if mapping is None:
            raise ContractError("no cluster mapping loaded")
        counts = Counter()
        for pred, bucket in self._by_p.items():
            counts[mapping.cluster_of(pred)] += len(bucket)
        return dict(counts)

    insert_triple = insert
    remove_triple = remove
    match_pattern = match
    store_stats = stats

    def load(self, path) -> ChangeSet:
        cs = ChangeSet()
        for t in load_triples(path):
            if self.insert(t):
                cs.added.append(t)
        cs.timestamp = self.clock
        return cs

    def dump(self, path) -> None:
        dump_triples(self._triples, path)


def match_pattern(store: TripleStore, pattern: TriplePattern) -> set:
    return store.match(pattern)


def store_stats(store: TripleStore, mapping=None) -> dict:
    return store.stats(mapping)
