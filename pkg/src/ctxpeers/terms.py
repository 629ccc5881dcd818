"""RDF terms, triples, triple patterns and their line-oriented text format.

The text format is N-Triples-like::

    <http://ctx.example.org/kitchen> <http://ctx.example.org/temperature> "23.5"^^<decimal> .

Literals carry one of five datatype keywords; the full XSD IRI of a
datatype is accepted on input and normalized to its keyword.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from typing import Iterable, Iterator, Union


class ValidationError(ValueError):
    """A term, triple or text line is malformed."""


DATATYPES = ("string", "integer", "decimal", "boolean", "dateTime")
NUMERIC = ("integer", "decimal")
ORDERED = ("integer", "decimal", "dateTime")

XSD = "http://www.w3.org/2001/XMLSchema#"

_INTEGER_RE = re.compile(r"[+-]?\d+\Z")
_DECIMAL_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)\Z")
_DATETIME_RE = re.compile(
    r"(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(\.\d+)?(Z|[+-]00:00)\Z")
_VAR_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def normalize_datatype(name: str) -> str:
    if name.startswith(XSD):
        name = name[len(XSD):]
    if name not in DATATYPES:
        raise ValidationError(f"unknown datatype {name!r}")
    return name


def parse_datetime(lexical: str) -> datetime:
    m = _DATETIME_RE.match(lexical)
    if not m:
        raise ValidationError(f"not an ISO-8601 UTC dateTime: {lexical!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    frac = m.group(7)
    micro = int(round(float(frac) * 1_000_000)) if frac else 0
    try:
        return datetime(year, month, day, hour, minute, second,
                        min(micro, 999_999), tzinfo=timezone.utc)
    except ValueError as exc:
        raise ValidationError(f"invalid dateTime {lexical!r}: {exc}") from None


@dataclass(frozen=True, order=True)
class Iri:
    value: str

    def __post_init__(self):
        v = self.value
        if not isinstance(v, str) or not v:
            raise ValidationError("IRI must be a non-empty string")
        if "://" not in v or v.startswith("://"):
            raise ValidationError(f"IRI is not absolute: {v!r}")
        if any(c.isspace() for c in v) or "<" in v or ">" in v:
            raise ValidationError(f"IRI contains illegal characters: {v!r}")

    def __str__(self):
        return f"<{self.value}>"


@dataclass(frozen=True, order=True)
class Literal:
    lexical: str
    datatype: str = "string"

    def __post_init__(self):
        if not isinstance(self.lexical, str):
            raise ValidationError("literal lexical form must be a string")
        dt = normalize_datatype(self.datatype)
        if dt != self.datatype:
            object.__setattr__(self, "datatype", dt)
        lex = self.lexical
        if dt == "integer" and not _INTEGER_RE.match(lex):
            raise ValidationError(f"bad integer literal {lex!r}")
        if dt == "decimal" and not _DECIMAL_RE.match(lex):
            raise ValidationError(f"bad decimal literal {lex!r}")
        if dt == "boolean" and lex not in ("true", "false", "1", "0"):
            raise ValidationError(f"bad boolean literal {lex!r}")
        if dt == "dateTime":
            parse_datetime(lex)

    @property
    def value(self):
        """The typed Python value used for comparisons."""
        dt = self.datatype
        if dt in NUMERIC:
            try:
                return Decimal(self.lexical)
            except InvalidOperation:  # pragma: no cover - guarded by regex
                raise ValidationError(self.lexical) from None
        if dt == "dateTime":
            return parse_datetime(self.lexical)
        if dt == "boolean":
            return self.lexical in ("true", "1")
        return self.lexical

    def __str__(self):
        return f'"{escape(self.lexical)}"^^<{self.datatype}>'


Term = Union[Iri, Literal]


@dataclass(frozen=True, order=True)
class Variable:
    name: str

    def __post_init__(self):
        name = self.name[1:] if self.name.startswith("?") else self.name
        if not _VAR_RE.match(name):
            raise ValidationError(f"bad variable name {self.name!r}")
        object.__setattr__(self, "name", name)

    def __str__(self):
        return f"?{self.name}"


@dataclass(frozen=True)
class Triple:
    subject: Iri
    predicate: Iri
    object: Term

    def __post_init__(self):
        if not isinstance(self.subject, Iri):
            raise ValidationError(f"subject must be an IRI: {self.subject!r}")
        if not isinstance(self.predicate, Iri):
            raise ValidationError(f"predicate must be an IRI: {self.predicate!r}")
        if not isinstance(self.object, (Iri, Literal)):
            raise ValidationError(f"object must be an IRI or literal: {self.object!r}")

    def __iter__(self):
        return iter((self.subject, self.predicate, self.object))

    def __str__(self):
        return format_triple(self)


@dataclass(frozen=True)
class TriplePattern:
    subject: Union[Variable, Iri]
    predicate: Union[Variable, Iri]
    object: Union[Variable, Iri, Literal]

    def __post_init__(self):
        if not isinstance(self.subject, (Variable, Iri)):
            raise ValidationError(f"bad subject position {self.subject!r}")
        if not isinstance(self.predicate, (Variable, Iri)):
            raise ValidationError(f"bad predicate position {self.predicate!r}")
        if not isinstance(self.object, (Variable, Iri, Literal)):
            raise ValidationError(f"bad object position {self.object!r}")

    def __iter__(self):
        return iter((self.subject, self.predicate, self.object))

    @property
    def variables(self):
        seen = []
        for pos in self:
            if isinstance(pos, Variable) and pos not in seen:
                seen.append(pos)
        return seen

    def matches(self, t: Triple) -> bool:
        """Position-wise match, honouring repeated variables."""
        bound = {}
        for pos, term in zip(self, t):
            if isinstance(pos, Variable):
                if bound.setdefault(pos, term) != term:
                    return False
            elif pos != term:
                return False
        return True

    def bind(self, t: Triple):
        """Variable bindings produced by matching ``t``, or None."""
        out = {}
        for pos, term in zip(self, t):
            if isinstance(pos, Variable):
                if out.setdefault(pos.name, term) != term:
                    return None
            elif pos != term:
                return None
        return out

    def __str__(self):
        return "({}, {}, {})".format(*(format_term(p) for p in self))


# -- text format -------------------------------------------------------------

_ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\r": "\\r", "\t": "\\t"}
_UNESCAPES = {"\\": "\\", '"': '"', "n": "\n", "r": "\r", "t": "\t"}


def escape(s: str) -> str:
    return "".join(_ESCAPES.get(c, c) for c in s)


def format_term(term) -> str:
    return str(term)


def format_triple(t: Triple) -> str:
    return f"{t.subject} {t.predicate} {t.object} ."


class _Scanner:
    """Cursor over one line of triple text."""

    def __init__(self, text: str, lineno: int = 1):
        self.text = text
        self.pos = 0
        self.lineno = lineno

    def error(self, msg):
        return ValidationError(f"line {self.lineno}, col {self.pos + 1}: {msg}")

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def iri(self) -> str:
        if self.peek() != "<":
            raise self.error("expected '<'")
        end = self.text.find(">", self.pos)
        if end < 0:
            raise self.error("unterminated IRI")
        value = self.text[self.pos + 1:end]
        self.pos = end + 1
        return value

    def string(self) -> str:
        if self.peek() != '"':
            raise self.error("expected '\"'")
        self.pos += 1
        out = []
        while True:
            if self.pos >= len(self.text):
                raise self.error("unterminated string")
            c = self.text[self.pos]
            if c == "\\":
                nxt = self.text[self.pos + 1:self.pos + 2]
                if nxt not in _UNESCAPES:
                    raise self.error(f"bad escape \\{nxt}")
                out.append(_UNESCAPES[nxt])
                self.pos += 2
            elif c == '"':
                self.pos += 1
                return "".join(out)
            else:
                out.append(c)
                self.pos += 1

    def datatype_suffix(self) -> str:
        if not self.text.startswith("^^", self.pos):
            return "string"
        self.pos += 2
        if self.peek() == "<":
            return self.iri()
        m = re.compile(r"[A-Za-z]+").match(self.text, self.pos)
        if not m:
            raise self.error("expected datatype")
        self.pos = m.end()
        return m.group(0)

    def term(self):
        self.skip_ws()
        c = self.peek()
        try:
            if c == "<":
                return Iri(self.iri())
            if c == '"':
                lex = self.string()
                return Literal(lex, self.datatype_suffix())
        except ValidationError as exc:
            if str(exc).startswith("line "):
                raise
            raise self.error(str(exc)) from None
        raise self.error("expected IRI or literal")


def parse_triple(line: str, lineno: int = 1) -> Triple:
    """Parse one ``<s> <p> <o> .`` line."""
    sc = _Scanner(line, lineno)
    s, p, o = sc.term(), sc.term(), sc.term()
    sc.skip_ws()
    if sc.peek() != ".":
        raise sc.error("expected '.'")
    sc.pos += 1
    sc.skip_ws()
    if sc.pos != len(sc.text) and sc.peek() != "#":
        raise sc.error("trailing characters")
    try:
        return Triple(s, p, o)
    except ValidationError as exc:
        raise sc.error(str(exc)) from None


def parse_term(text: str) -> Term:
    sc = _Scanner(text.strip())
    term = sc.term()
    if sc.pos != len(sc.text):
        raise sc.error("trailing characters")
    return term


def parse_triples(lines: Iterable[str]) -> Iterator[Triple]:
    for n, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield parse_triple(stripped, n)


def load_triples(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return list(parse_triples(fh))


def dump_triples(triples: Iterable[Triple], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in sorted(triples, key=triple_sort_key):
            fh.write(format_triple(t) + "\n")


def term_sort_key(term):
    """Total order over mixed IRIs and literals, for deterministic output."""
    if isinstance(term, Iri):
        return (0, term.value, "")
    return (1, term.lexical, term.datatype)


def triple_sort_key(t: Triple):
    return (t.subject.value, t.predicate.value, term_sort_key(t.object))
