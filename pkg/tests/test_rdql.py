import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from ctxpeers.rdql import (Filter, QuerySemanticError, QuerySyntaxError, ResultSet,
                           apply_filters, evaluate_local, format_query, format_resultset,
                           join_bindings, parse_query, parse_resultset)
from ctxpeers.store import TripleStore
from ctxpeers.terms import Iri, Literal, Triple, Variable
from oracles import brute_force, filter_holds, rows_of

EX = "http://ctx.example.org/"


def ex(name):
    return Iri(EX + name)


def test_parse_example_query():
    q = parse_query('SELECT ?r WHERE (?r, <ex:temperature>, ?t) AND ?t > "25.0"^^decimal '
                    "USING ex FOR <http://ctx.example.org/>")
    assert q.variables == ("r",)
    assert len(q.patterns) == 1 and len(q.filters) == 1
    assert q.patterns[0].predicate == ex("temperature")
    assert q.filters[0].constant == Literal("25.0", "decimal")


def test_missing_pattern_is_syntax_error():
    with pytest.raises(QuerySyntaxError) as info:
        parse_query("SELECT ?x WHERE")
    assert info.value.line == 1


def test_unbound_select_is_semantic_error():
    with pytest.raises(QuerySemanticError):
        parse_query("SELECT ?z WHERE (?a, ?p, ?b)")


def test_format_round_trip():
    text = ('SELECT ?p ?t WHERE (?p, <http://ctx.example.org/in>, ?r), '
            '(?r, <http://ctx.example.org/temp>, ?t) AND ?t >= 3, ?t != 9')
    q = parse_query(text)
    assert parse_query(format_query(q)) == q


def test_single_pattern_evaluation():
    s = TripleStore([Triple(ex("bob"), ex("locatedIn"), ex("kitchen"))])
    rs = evaluate_local(parse_query(f"SELECT ?s WHERE (?s, <{EX}locatedIn>, <{EX}kitchen>)"), s)
    assert rs == ResultSet(["s"], [(ex("bob"),)])


def test_chained_join():
    s = TripleStore([
        Triple(ex("bob"), ex("locatedIn"), ex("kitchen")),
        Triple(ex("ann"), ex("locatedIn"), ex("hall")),
        Triple(ex("kitchen"), ex("temperature"), Literal("22", "integer")),
    ])
    q = parse_query(f"SELECT ?p ?t WHERE (?p, <{EX}locatedIn>, ?r), (?r, <{EX}temperature>, ?t)")
    assert evaluate_local(q, s) == ResultSet(["p", "t"], [(ex("bob"), Literal("22", "integer"))])


def test_join_bindings_examples():
    a, b, c = ex("a"), ex("b"), ex("c")
    assert join_bindings(ResultSet(["x"], [(a,)]), ResultSet(["x", "y"], [(a, b)])) == \
        ResultSet(["x", "y"], [(a, b)])
    assert len(join_bindings(ResultSet(["x"], [(a,)]), ResultSet(["x"], [(c,)]))) == 0
    cross = join_bindings(ResultSet(["x"], [(a,), (b,)]), ResultSet(["y"], [(c,)]))
    assert len(cross) == 2 and set(cross.variables) == {"x", "y"}


def test_filters():
    rs = ResultSet(["t"], [(Literal("20", "integer"),), (Literal("30.5", "decimal"),),
                           (ex("x"),)])
    assert apply_filters(rs, []) == rs
    hot = apply_filters(rs, [Filter(Variable("t"), ">", Literal("25", "integer"))])
    assert hot == ResultSet(["t"], [(Literal("30.5", "decimal"),)])
    when = ResultSet(["d"], [(Literal("2024-01-02T00:00:00Z", "dateTime"),),
                             (Literal("2023-12-31T00:00:00Z", "dateTime"),)])
    late = apply_filters(when, [Filter(Variable("d"), ">",
                                       Literal("2024-01-01T00:00:00Z", "dateTime"))])
    assert len(late) == 1


def test_ordering_on_string_constant_rejected():
    with pytest.raises(QuerySemanticError):
        Filter(Variable("x"), "<", Literal("abc"))


def test_resultset_text_round_trip():
    rs = ResultSet(["a", "b"], [(ex("x"), Literal('tab\there "q"')), (ex("y"), Literal("1", "integer"))])
    assert parse_resultset(format_resultset(rs)) == rs


def _random_store(rng, n):
    subj = [ex(f"s{i}") for i in range(8)]
    objs = subj + [Literal(str(i), "integer") for i in range(6)]
    preds = [ex(f"p{i}") for i in range(3)]
    return [Triple(rng.choice(subj), rng.choice(preds), rng.choice(objs)) for _ in range(n)]


def _random_query(rng):
    names = ["a", "b", "c", "d"]
    pats = []
    for _ in range(3):
        s = f"?{rng.choice(names)}"
        o = f"?{rng.choice(names)}" if rng.random() < 0.8 else f"<{EX}s{rng.randrange(8)}>"
        p = f"<{EX}p{rng.randrange(3)}>" if rng.random() < 0.85 else "?p"
        pats.append(f"({s}, {p}, {o})")
    body = ", ".join(pats)
    used = sorted({v for v in names if f"?{v}" in body})
    sel = rng.sample(used, rng.randint(1, len(used)))
    filt = ""
    if rng.random() < 0.4:
        filt = f" AND ?{rng.choice(used)} {rng.choice(['<', '>=', '=', '!='])} {rng.randrange(6)}"
    return parse_query(f"SELECT {' '.join('?' + v for v in sel)} WHERE {body}{filt}")


def test_evaluate_against_exhaustive_assignment():
    rng = random.Random(3)
    for _ in range(60):
        triples = _random_store(rng, 300)
        q = _random_query(rng)
        got = evaluate_local(q, TripleStore(triples))
        assert rows_of(got, q.variables) == brute_force(q, triples), str(q)


def test_join_against_nested_loop():
    rng = random.Random(4)
    vals = [ex(c) for c in "abc"]
    for _ in range(200):
        ha = rng.sample(["x", "y", "z"], rng.randint(1, 3))
        hb = rng.sample(["x", "y", "z"], rng.randint(1, 3))
        ra = {tuple(rng.choice(vals) for _ in ha) for _ in range(rng.randrange(5))}
        rb = {tuple(rng.choice(vals) for _ in hb) for _ in range(rng.randrange(5))}
        want = set()
        header = ha + [v for v in hb if v not in ha]
        for x, y in itertools.product(ra, rb):
            da, db = dict(zip(ha, x)), dict(zip(hb, y))
            if all(da[k] == db[k] for k in da.keys() & db.keys()):
                merged = {**da, **db}
                want.add(tuple(merged[h] for h in header))
        got = join_bindings(ResultSet(ha, ra), ResultSet(hb, rb))
        assert rows_of(got, header) == want


numbers = st.one_of(st.integers(-50, 50).map(lambda i: Literal(str(i), "integer")),
                    st.decimals(-50, 50, places=2, allow_nan=False).map(
                        lambda d: Literal(str(d), "decimal")))


@given(numbers, st.sampled_from(["=", "!=", "<", "<=", ">", ">="]), numbers)
def test_filter_matches_reference_comparison(term, op, constant):
    assert Filter(Variable("v"), op, constant).test(term) == filter_holds(term, op, constant)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_join_is_commutative(seed):
    rng = random.Random(seed)
    vals = [ex(c) for c in "ab"]
    a = ResultSet(["x", "y"], {(rng.choice(vals), rng.choice(vals)) for _ in range(3)})
    b = ResultSet(["y", "z"], {(rng.choice(vals), rng.choice(vals)) for _ in range(3)})
    assert join_bindings(a, b) == join_bindings(b, a)
