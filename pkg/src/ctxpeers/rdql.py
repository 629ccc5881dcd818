"""RDQL-subset query engine.

Grammar (keywords case-insensitive)::

    query      := "SELECT" varlist "WHERE" pattern ("," pattern)*
                  ("AND" filter ("," filter)*)?
                  ("USING" prefixdecl ("," prefixdecl)*)?
    varlist    := var ((",")? var)*
    pattern    := "(" term "," term "," term ")"
    filter     := var op constant          op in = != < <= > >=
    prefixdecl := name "FOR" "<" iri ">"

Terms are ``?var``, ``<absolute-iri>``, ``<prefix:local>``, ``prefix:local``
or literals ``"lex"^^datatype`` (bare numbers are integer/decimal, bare
``true``/``false`` are boolean).
"""

from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field
from typing import Iterable

from .terms import (
    NUMERIC, ORDERED, Iri, Literal, Triple, TriplePattern, ValidationError,
    Variable, escape, normalize_datatype, parse_term, term_sort_key,
)


class QuerySyntaxError(ValueError):
    def __init__(self, msg, line=None, col=None):
        if line is not None:
            msg = f"line {line}, col {col}: {msg}"
        super().__init__(msg)
        self.line = line
        self.col = col


class QuerySemanticError(ValueError):
    pass


OPS = {
    "=": operator.eq, "!=": operator.ne, "<": operator.lt,
    "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}


@dataclass(frozen=True)
class Filter:
    variable: Variable
    op: str
    constant: Literal

    def __post_init__(self):
        if self.op not in OPS:
            raise QuerySemanticError(f"unknown operator {self.op!r}")
        if not isinstance(self.constant, Literal):
            raise QuerySemanticError("filter constant must be a literal")
        if self.op not in ("=", "!=") and self.constant.datatype not in ORDERED:
            raise QuerySemanticError(
                f"operator {self.op} needs an integer, decimal or dateTime constant")

    def test(self, term) -> bool:
        """Apply to one bound term; type mismatches never pass."""
        if not isinstance(term, Literal):
            return False
        cdt, tdt = self.constant.datatype, term.datatype
        if cdt in NUMERIC:
            if tdt not in NUMERIC:
                return False
        elif cdt != tdt:
            return False
        return OPS[self.op](term.value, self.constant.value)

    def __str__(self):
        return f"{self.variable} {self.op} {_rdql_term(self.constant)}"


@dataclass(frozen=True)
class Query:
    select: tuple
    patterns: tuple
    filters: tuple = ()
    prefixes: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "select", tuple(self.select))
        object.__setattr__(self, "patterns", tuple(self.patterns))
        object.__setattr__(self, "filters", tuple(self.filters))
        if not self.patterns:
            raise QuerySemanticError("query needs at least one pattern")
        bound = {v for p in self.patterns for v in p.variables}
        for v in self.select:
            if v not in bound:
                raise QuerySemanticError(f"selected variable {v} not in any pattern")
        for f in self.filters:
            if f.variable not in bound:
                raise QuerySemanticError(f"filtered variable {f.variable} not in any pattern")

    @property
    def variables(self):
        return tuple(v.name for v in self.select)

    def __str__(self):
        return format_query(self)


# -- result sets -------------------------------------------------------------

class ResultSet:
    """A set of rows over a shared header of variable names."""

    __slots__ = ("variables", "rows")

    def __init__(self, variables: Iterable[str], rows: Iterable[tuple] = ()):
        self.variables = tuple(variables)
        if len(set(self.variables)) != len(self.variables):
            raise ValueError(f"duplicate variables in header {self.variables}")
        width = len(self.variables)
        rows = frozenset(tuple(r) for r in rows)
        for r in rows:
            if len(r) != width:
                raise ValueError(f"row {r} does not fit header {self.variables}")
        self.rows = rows

    @classmethod
    def unit(cls):
        """The join identity: no columns, one empty row."""
        return cls((), [()])

    @classmethod
    def from_bindings(cls, variables, bindings: Iterable[dict]):
        variables = tuple(variables)
        return cls(variables, (tuple(b[v] for v in variables) for b in bindings))

    def bindings(self):
        for r in self.rows:
            yield dict(zip(self.variables, r))

    def project(self, variables) -> "ResultSet":
        idx = [self.variables.index(v) for v in variables]
        return ResultSet(variables, (tuple(r[i] for i in idx) for r in self.rows))

    def union(self, other: "ResultSet") -> "ResultSet":
        if set(self.variables) != set(other.variables):
            raise ValueError("union needs identical headers")
        return ResultSet(self.variables, self.rows | other.project(self.variables).rows)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: [term_sort_key(t) for t in r])

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.bindings())

    def __eq__(self, other):
        if not isinstance(other, ResultSet):
            return NotImplemented
        if set(self.variables) != set(other.variables):
            return False
        return self.rows == other.project(self.variables).rows

    def __hash__(self):
        order = sorted(self.variables)
        return hash((tuple(order), self.project(order).rows))

    def __repr__(self):
        return f"ResultSet({self.variables!r}, {len(self.rows)} rows)"

    def to_json(self):
        return {"vars": list(self.variables),
                "rows": [[str(t) for t in r] for r in self.sorted_rows()]}

    @classmethod
    def from_json(cls, data):
        return cls(data["vars"], (tuple(parse_term(t) for t in r) for r in data["rows"]))


def format_resultset(rs: ResultSet) -> str:
    """Header line then one tab-separated line per row."""
    lines = ["\t".join(f"?{v}" for v in rs.variables)]
    lines.extend("\t".join(str(t) for t in r) for r in rs.sorted_rows())
    return "\n".join(lines) + "\n"


def parse_resultset(text: str) -> ResultSet:
    lines = text.rstrip("\n").split("\n")
    header = [Variable(h).name for h in lines[0].split("\t") if h]
    rows = [tuple(parse_term(c) for c in line.split("\t")) for line in lines[1:]]
    return ResultSet(header, rows)


# -- evaluation --------------------------------------------------------------

def pattern_results(store, pattern: TriplePattern) -> ResultSet:
    names = [v.name for v in pattern.variables]
    rows = []
    for t in store.match(pattern):
        b = pattern.bind(t)
        if b is not None:
            rows.append(tuple(b[n] for n in names))
    return ResultSet(names, rows)


def join_bindings(a: ResultSet, b: ResultSet) -> ResultSet:
    """Natural hash join; no shared variables degenerates to a cross product."""
    shared = [v for v in a.variables if v in b.variables]
    extra = [v for v in b.variables if v not in a.variables]
    a_idx = [a.variables.index(v) for v in shared]
    b_idx = [b.variables.index(v) for v in shared]
    b_extra = [b.variables.index(v) for v in extra]
    table = {}
    for r in b.rows:
        table.setdefault(tuple(r[i] for i in b_idx), []).append(tuple(r[i] for i in b_extra))
    rows = []
    for r in a.rows:
        for tail in table.get(tuple(r[i] for i in a_idx), ()):
            rows.append(r + tail)
    return ResultSet(a.variables + tuple(extra), rows)


def apply_filters(rs: ResultSet, filters) -> ResultSet:
    if not filters:
        return rs
    checks = [(rs.variables.index(f.variable.name), f) for f in filters]
    return ResultSet(rs.variables,
                     (r for r in rs.rows if all(f.test(r[i]) for i, f in checks)))


def finish(q: Query, joined: ResultSet) -> ResultSet:
    """Filter then project a fully joined result."""
    return apply_filters(joined, q.filters).project(q.variables)


def evaluate_local(q: Query, store) -> ResultSet:
    rs = ResultSet.unit()
    for p in q.patterns:
        rs = join_bindings(rs, pattern_results(store, p))
    return finish(q, rs)


# -- parsing -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<var>\?[A-Za-z_][A-Za-z0-9_]*)
  | (?P<iri><[^<>\s]*>)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<op><=|>=|!=|==|=|<|>)
  | (?P<amp>&&)
  | (?P<punct>[(),])
  | (?P<dtmark>\^\^)
  | (?P<number>[+-]?(?:\d+\.\d*|\.\d+|\d+))
  | (?P<qname>[A-Za-z_][A-Za-z0-9_.-]*:[A-Za-z0-9_./#-]*)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
""", re.X)

KEYWORDS = {"SELECT", "WHERE", "AND", "USING", "FOR"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str):
    pos, line, line_start = 0, 1, 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind, value = m.lastgroup, m.group()
        if kind == "ws":
            nl = value.count("\n")
            if nl:
                line += nl
                line_start = pos + value.rfind("\n") + 1
        else:
            if kind == "name" and value.upper() in KEYWORDS:
                kind, value = "kw", value.upper()
            elif kind == "op" and value == "==":
                value = "="
            out.append(_Tok(kind, value, line, pos - line_start + 1))
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - line_start + 1))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0
        self.prefixes = {}
        self.pending = []  # (pname, tok) resolved once USING is read

    @property
    def tok(self):
        return self.toks[self.i]

    def error(self, msg, tok=None):
        tok = tok or self.tok
        return QuerySyntaxError(msg, tok.line, tok.col)

    def next(self):
        t = self.tok
        self.i += 1
        return t

    def accept(self, kind, text=None):
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return t
        return None

    def expect(self, kind, text=None, what=None):
        t = self.accept(kind, text)
        if t is None:
            found = self.tok.text or "end of input"
            raise self.error(f"expected {what or text or kind}, found {found!r}")
        return t

    def query(self):
        self.expect("kw", "SELECT")
        select = [Variable(self.expect("var", what="variable").text)]
        while True:
            if self.accept("punct", ","):
                select.append(Variable(self.expect("var", what="variable").text))
            elif self.tok.kind == "var":
                select.append(Variable(self.next().text))
            else:
                break
        self.expect("kw", "WHERE")
        patterns = [self.pattern()]
        while self.accept("punct", ","):
            patterns.append(self.pattern())
        filters = []
        if self.accept("kw", "AND"):
            filters.append(self.filter())
            while self.accept("punct", ",") or self.accept("amp") or self.accept("kw", "AND"):
                filters.append(self.filter())
        if self.accept("kw", "USING"):
            self.prefixdecl()
            while self.accept("punct", ","):
                self.prefixdecl()
        if self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r}")
        return select, patterns, filters

    def prefixdecl(self):
        name = self.accept("name") or self.expect("kw", what="prefix name")
        self.expect("kw", "FOR")
        iri = self.expect("iri", what="<iri>")
        self.prefixes[name.text.lower() if name.kind == "kw" else name.text] = iri.text[1:-1]

    def pattern(self):
        self.expect("punct", "(")
        s = self.term()
        self.expect("punct", ",")
        p = self.term()
        self.expect("punct", ",")
        o = self.term()
        self.expect("punct", ")")
        return (s, p, o)

    def term(self):
        t = self.tok
        if t.kind == "var":
            self.next()
            return Variable(t.text)
        if t.kind == "iri":
            self.next()
            return ("iri", t.text[1:-1], t)
        if t.kind == "qname":
            self.next()
            return ("iri", t.text, t)
        if t.kind in ("string", "number") or (t.kind == "name" and t.text in ("true", "false")):
            return self.literal()
        raise self.error(f"expected term, found {t.text or 'end of input'!r}")

    def literal(self):
        t = self.next()
        if t.kind == "number":
            dt = "decimal" if "." in t.text else "integer"
            return self._lit(t.text, dt, t)
        if t.kind == "name":
            return self._lit(t.text, "boolean", t)
        lex = parse_term(t.text + "^^<string>").lexical
        dt = "string"
        if self.accept("dtmark"):
            d = self.tok
            if d.kind == "iri":
                dt = d.text[1:-1]
            elif d.kind in ("name", "qname"):
                dt = d.text.split(":", 1)[1] if d.kind == "qname" else d.text
            else:
                raise self.error("expected datatype")
            self.next()
            try:
                dt = normalize_datatype(dt)
            except ValidationError as exc:
                raise self.error(str(exc), d) from None
        return self._lit(lex, dt, t)

    def _lit(self, lex, dt, tok):
        try:
            return Literal(lex, dt)
        except ValidationError as exc:
            raise self.error(str(exc), tok) from None

    def filter(self):
        var = Variable(self.expect("var", what="variable").text)
        op_tok = self.expect("op", what="comparison operator")
        const = self.literal() if self.tok.kind in ("string", "number", "name") else None
        if const is None:
            raise self.error("expected literal constant")
        try:
            return Filter(var, op_tok.text, const)
        except QuerySemanticError as exc:
            raise self.error(str(exc), op_tok) from None

    def resolve(self, term):
        if not isinstance(term, tuple):
            return term
        _, text, tok = term
        if "://" not in text:
            if ":" not in text:
                raise self.error(f"relative IRI {text!r}", tok)
            prefix, local = text.split(":", 1)
            if prefix not in self.prefixes:
                raise QuerySemanticError(
                    f"line {tok.line}, col {tok.col}: unknown prefix {prefix!r}")
            text = self.prefixes[prefix] + local
        try:
            return Iri(text)
        except ValidationError as exc:
            raise self.error(str(exc), tok) from None


def parse_query(text: str) -> Query:
    """Parse query text into a :class:`Query` with all prefixes expanded.

    Raises QuerySyntaxError (with line/column) or QuerySemanticError.
    """
    p = _Parser(text)
    select, raw_patterns, filters = p.query()
    patterns = []
    for s, pr, o in raw_patterns:
        s, pr, o = p.resolve(s), p.resolve(pr), p.resolve(o)
        if isinstance(s, Literal) or isinstance(pr, Literal):
            raise QuerySemanticError("literals may only appear in object position")
        patterns.append(TriplePattern(s, pr, o))
    return Query(select, patterns, filters, dict(p.prefixes))


def _rdql_term(term) -> str:
    if isinstance(term, Literal):
        return f'"{escape(term.lexical)}"^^{term.datatype}'
    return str(term)


def format_query(q: Query) -> str:
    """Canonical text: absolute IRIs, one USING clause per prefix."""
    parts = ["SELECT " + ", ".join(str(v) for v in q.select), "WHERE"]
    parts.append(", ".join(
        "(" + ", ".join(_rdql_term(t) for t in p) + ")" for p in q.patterns))
    if q.filters:
        parts.append("AND " + ", ".join(str(f) for f in q.filters))
    if q.prefixes:
        parts.append("USING " + ", ".join(
            f"{k} FOR <{v}>" for k, v in sorted(q.prefixes.items())))
    return " ".join(parts)


# -- wire helpers ------------------------------------------------------------

def pattern_to_json(p: TriplePattern) -> list:
    return [str(x) for x in p]


def _position(text: str):
    return Variable(text) if text.startswith("?") else parse_term(text)


def pattern_from_json(data) -> TriplePattern:
    if not isinstance(data, list) or len(data) != 3:
        raise ValueError(f"bad pattern {data!r}")
    return TriplePattern(*(_position(x) for x in data))


def filter_to_json(f: Filter) -> list:
    return [f.variable.name, f.op, str(f.constant)]


def filter_from_json(data) -> Filter:
    var, op, const = data
    return Filter(Variable(var), op, parse_term(const))


def parse_pattern(text: str, prefixes=None) -> TriplePattern:
    """Parse a lone ``(s, p, o)`` pattern, optionally followed by USING."""
    p = _Parser(text + _using(prefixes))
    raw = p.pattern()
    if p.accept("kw", "USING"):
        p.prefixdecl()
        while p.accept("punct", ","):
            p.prefixdecl()
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r}")
    s, pr, o = (p.resolve(t) for t in raw)
    if isinstance(s, Literal) or isinstance(pr, Literal):
        raise QuerySemanticError("literals may only appear in object position")
    return TriplePattern(s, pr, o)


def parse_filter(text: str) -> Filter:
    p = _Parser(text)
    f = p.filter()
    if p.tok.kind != "eof":
        raise p.error(f"unexpected {p.tok.text!r}")
    return f


def _using(prefixes):
    if not prefixes:
        return ""
    return " USING " + ", ".join(f"{k} FOR <{v}>" for k, v in prefixes.items())
