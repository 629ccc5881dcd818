"""Reference implementations used only by the tests.

Each one is written from the definitions, not from the package code:
plain loops, no indexes, no shared helpers beyond the term dataclasses.
"""

from __future__ import annotations

import bisect
from datetime import datetime, timezone
from decimal import Decimal

from ctxpeers.terms import Iri, Literal, Variable

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK
    return h


def successor_of(ids, x):
    """Smallest id >= x, wrapping to the smallest overall."""
    ids = sorted(ids)
    i = bisect.bisect_left(ids, x)
    return ids[i % len(ids)]


def ring_neighbours(ids):
    ids = sorted(ids)
    n = len(ids)
    return {v: (ids[(i - 1) % n], ids[(i + 1) % n]) for i, v in enumerate(ids)}


def prefixes_contiguous(ids, bits=16):
    """Every prefix occupies one unbroken run of the sorted ring."""
    order = [v >> (64 - bits) for v in sorted(ids)]
    if len(set(order)) <= 1:
        return True
    runs = sum(1 for i in range(len(order)) if order[i] != order[i - 1])
    return runs == len(set(order))


# -- filters and pattern matching --------------------------------------------

def _typed(lit):
    if lit.datatype in ("integer", "decimal"):
        return "num", Decimal(lit.lexical)
    if lit.datatype == "dateTime":
        s = lit.lexical.replace("Z", "+00:00")
        d = datetime.fromisoformat(s)
        if d.tzinfo is None:
            d = d.replace(tzinfo=timezone.utc)
        return "dt", d
    if lit.datatype == "boolean":
        return "bool", lit.lexical in ("true", "1")
    return "str", lit.lexical


def filter_holds(term, op, constant) -> bool:
    if not isinstance(term, Literal):
        return False
    ka, a = _typed(term)
    kb, b = _typed(constant)
    if ka != kb:
        return False
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if ka not in ("num", "dt"):
        return False
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]


def unify(pattern, triple, binding):
    b = dict(binding)
    for slot, term in zip((pattern.subject, pattern.predicate, pattern.object),
                          (triple.subject, triple.predicate, triple.object)):
        if isinstance(slot, Variable):
            if slot.name in b and b[slot.name] != term:
                return None
            b[slot.name] = term
        elif slot != term:
            return None
    return b


def brute_force(query, triples):
    """Set of projected rows (tuples ordered as the SELECT list)."""
    triples = list(triples)
    rows = [{}]
    for pat in query.patterns:
        cands = [t for t in triples if unify(pat, t, {}) is not None]
        rows = [b2 for b in rows for t in cands if (b2 := unify(pat, t, b)) is not None]
    rows = [b for b in rows
            if all(filter_holds(b[f.variable.name], f.op, f.constant) for f in query.filters)]
    names = [v.name for v in query.select]
    return {tuple(b[n] for n in names) for b in rows}


def rows_of(rs, names):
    idx = [rs.variables.index(n) for n in names]
    return {tuple(r[i] for i in idx) for r in rs.rows}


def sub_matches(pattern, filters, kind, events, triple) -> bool:
    if kind not in events:
        return False
    b = unify(pattern, triple, {})
    if b is None:
        return False
    return all(filter_holds(b[f.variable.name], f.op, f.constant) for f in filters)


def expected_notifications(change_logs, pattern, filters, events, since=0):
    """Replay every producer's change log: the multiset a subscriber is owed."""
    from collections import Counter
    want = Counter()
    for producer, log in change_logs.items():
        for when, cs in log:
            if when < since:
                continue
            for t in cs.added:
                if sub_matches(pattern, filters, "added", events, t):
                    want[(producer, "added", str(t))] += 1
            for t in cs.removed:
                if sub_matches(pattern, filters, "removed", events, t):
                    want[(producer, "removed", str(t))] += 1
    return want


def lease_alive(events, t):
    """Events is a list of (time, op, amount): op 'grant' sets expiry to time+amount,
    'renew' moves an unexpired lease's end to time+amount unless that is
    earlier.  True if alive at t."""
    expiry = None
    for when, op, amount in sorted(events, key=lambda e: e[0]):
        if when > t:
            break
        if op == "grant":
            expiry = when + amount
        elif op == "renew" and expiry is not None and when < expiry:
            expiry = max(expiry, when + amount)
        elif op == "drop":
            expiry = None
    return expiry is not None and t < expiry


def playback_end_state(rows, functional=True):
    """Final store contents after applying time-ordered sensor rows."""
    state = {}
    for _, s, p, o in sorted(rows, key=lambda r: r[0]):
        key = (s, p) if functional else (s, p, o)
        state[key] = o
    return {(s, p, o) for (s, p, *_), o in state.items()}


__all__ = ["fnv1a_64", "successor_of", "ring_neighbours", "prefixes_contiguous",
           "filter_holds", "unify", "brute_force", "rows_of", "sub_matches",
           "expected_notifications", "lease_alive", "playback_end_state", "Iri"]
