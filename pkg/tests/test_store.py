import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from ctxpeers.semantic import ClusterMapping
from ctxpeers.store import ContractError, TripleStore, store_stats
from ctxpeers.terms import (Iri, Literal, Triple, TriplePattern, ValidationError, Variable,
                            format_triple, parse_triple)

EX = "http://ctx.example.org/"
TEMP = Iri(EX + "temperature")
LOC = Iri(EX + "locatedIn")
MAPPING = ClusterMapping.parse([f"functional <{TEMP.value}> Environment",
                                f"<{LOC.value}> Location"])


def ex(name):
    return Iri(EX + name)


def sample_store():
    s = TripleStore(mapping=MAPPING)
    s.insert(Triple(ex("kitchen"), TEMP, Literal("21.0", "decimal")))
    s.insert(Triple(ex("hall"), TEMP, Literal("19.5", "decimal")))
    for who in ("bob", "ann", "cat"):
        s.insert(Triple(ex(who), LOC, ex("kitchen")))
    return s


def test_insert_and_reinsert():
    s = TripleStore()
    t = Triple(ex("kitchen"), TEMP, Literal("23.5", "decimal"))
    assert s.insert(t) is True
    assert s.insert(t) is False
    assert len(s) == 1


def test_invalid_terms_rejected():
    with pytest.raises(ValidationError):
        Iri("not an iri")
    with pytest.raises(ValidationError):
        Literal("abc", "integer")
    with pytest.raises(ValidationError):
        parse_triple('<http://a.org/x> <http://a.org/p> "1"^^<integer>')


def test_thousand_triples_all_findable():
    s = TripleStore()
    triples = [Triple(ex(f"e{i}"), ex(f"p{i % 7}"), Literal(str(i), "integer"))
               for i in range(1000)]
    for t in triples:
        s.insert(t)
    assert len(s) == 1000
    for t in triples:
        assert s.match(TriplePattern(*t)) == {t}


def test_remove_semantics():
    s = sample_store()
    t = Triple(ex("bob"), LOC, ex("kitchen"))
    assert s.remove(t) is True
    assert s.remove(t) is False
    assert s.match(TriplePattern(*t)) == set()


def test_match_predicate_and_unconstrained():
    s = sample_store()
    got = s.match(TriplePattern(Variable("s"), TEMP, Variable("o")))
    assert len(got) == 2 and all(t.predicate == TEMP for t in got)
    assert s.match(TriplePattern(Variable("s"), Variable("p"), Variable("o"))) == set(s)


def _random_triples(rng, n):
    subj = [ex(f"s{i}") for i in range(12)]
    pred = [ex(f"p{i}") for i in range(5)]
    objs = subj + [Literal(str(i), "integer") for i in range(8)]
    return {Triple(rng.choice(subj), rng.choice(pred), rng.choice(objs)) for _ in range(n)}


def test_match_against_full_scan():
    rng = random.Random(0)
    for _ in range(20):
        triples = _random_triples(rng, 500)
        s = TripleStore(triples)
        pool = list(triples)
        for _ in range(25):
            ref = rng.choice(pool)
            slots = [term if rng.random() < 0.5 else Variable(f"v{k}") for k, term in enumerate(ref)]
            pat = TriplePattern(*slots)
            want = {t for t in triples
                    if all(isinstance(a, Variable) or a == b for a, b in zip(slots, t))}
            assert s.match(pat) == want


def test_replace_functional():
    s = TripleStore(mapping=MAPPING)
    s.insert(Triple(ex("kitchen"), TEMP, Literal("22.0", "decimal")))
    cs = s.replace_functional(ex("kitchen"), TEMP, Literal("23.5", "decimal"))
    assert cs.removed == [Triple(ex("kitchen"), TEMP, Literal("22.0", "decimal"))]
    assert cs.added == [Triple(ex("kitchen"), TEMP, Literal("23.5", "decimal"))]
    assert not s.replace_functional(ex("kitchen"), TEMP, Literal("23.5", "decimal"))
    with pytest.raises(ContractError):
        s.replace_functional(ex("bob"), LOC, ex("hall"))


def test_stats():
    assert store_stats(TripleStore(mapping=MAPPING)) == {}
    assert store_stats(sample_store()) == {"Environment": 2, "Location": 3}


def test_stats_against_classification_loop():
    rng = random.Random(1)
    mapping = ClusterMapping.parse([f"<{EX}p0> A", f"<{EX}p1> B", f"<{EX}p2> A"])
    s = TripleStore(_random_triples(rng, 300), mapping=mapping)
    want = Counter()
    for t in s:
        name = t.predicate.value.rsplit("/", 1)[1]
        want[{"p0": "A", "p1": "B", "p2": "A"}.get(name, "Misc")] += 1
    assert store_stats(s) == dict(want)


def test_dump_and_load(tmp_path):
    s = sample_store()
    path = tmp_path / "ctx.nt"
    s.dump(path)
    other = TripleStore()
    cs = other.load(path)
    assert set(other) == set(s) and len(cs.added) == len(s)


lexical = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=20)


@given(lexical)
def test_literal_escaping_round_trip(text):
    t = Triple(ex("a"), ex("b"), Literal(text))
    assert parse_triple(format_triple(t)) == t


@settings(max_examples=50)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 30)), max_size=60))
def test_store_behaves_as_a_set(ops):
    s, model = TripleStore(), set()
    for add, k in ops:
        t = Triple(ex(f"s{k % 5}"), ex(f"p{k % 3}"), Literal(str(k), "integer"))
        if add:
            assert s.insert(t) == (t not in model)
            model.add(t)
        else:
            assert s.remove(t) == (t in model)
            model.discard(t)
        assert set(s) == model
