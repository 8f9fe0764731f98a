"""RDF term and quad model: IRIs, blank nodes, typed literals, named-graph statements.

Literal equality is value-based for the supported XSD datatypes (string,
integer, boolean, double, float, dateTime, anyURI) and lexical for everything
else, so `"01"^^xsd:integer` equals `"1"^^xsd:integer` while two unknown-type
literals compare by their exact text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Union

XSD = "http://www.w3.org/2001/XMLSchema#"
RDF = "http://www.w3.org/1999/02/22-rdf-syntax-ns#"
RDFS = "http://www.w3.org/2000/01/rdf-schema#"
OWL = "http://www.w3.org/2002/07/owl#"
SH = "http://www.w3.org/ns/shacl#"
PROV = "http://www.w3.org/ns/prov#"

XSD_STRING = XSD + "string"
XSD_INTEGER = XSD + "integer"
XSD_BOOLEAN = XSD + "boolean"
XSD_DOUBLE = XSD + "double"
XSD_FLOAT = XSD + "float"
XSD_DATETIME = XSD + "dateTime"
XSD_ANYURI = XSD + "anyURI"
XSD_DECIMAL = XSD + "decimal"
RDF_LANGSTRING = RDF + "langString"
RDF_TYPE = RDF + "type"
RDFS_SUBCLASSOF = RDFS + "subClassOf"
RDFS_DOMAIN = RDFS + "domain"
RDFS_RANGE = RDFS + "range"

# Datatypes with value-space comparison; all others compare lexically.
VALUE_DATATYPES = frozenset(
    [XSD_STRING, XSD_INTEGER, XSD_BOOLEAN, XSD_DOUBLE, XSD_FLOAT, XSD_DATETIME, XSD_ANYURI]
)

NUMERIC_DATATYPES = frozenset([XSD_INTEGER, XSD_DOUBLE, XSD_FLOAT])

_SCHEME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.-]*:")


class TermError(ValueError):
    """Malformed term (relative IRI, bad kind combination, ...)."""


def is_absolute_iri(text: str) -> bool:
    return bool(_SCHEME_RE.match(text))


def _parse_datetime(lexical: str) -> datetime:
    text = lexical.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    value = datetime.fromisoformat(text)
    # Zone-less values are pinned to UTC so comparisons stay total.
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value


def _parse_boolean(lexical: str) -> bool:
    if lexical in ("true", "1"):
        return True
    if lexical in ("false", "0"):
        return False
    raise ValueError(lexical)


@dataclass(frozen=True)
class Term:
    """One RDF term. kind is 'iri', 'blank', or 'literal'."""

    kind: str
    value: str  # IRI text, blank label, or literal lexical form
    datatype: Optional[str] = None
    language: Optional[str] = None
    _key: tuple = field(init=False, repr=False, compare=False, default=())

    def __post_init__(self):
        if self.kind == "iri":
            if not is_absolute_iri(self.value):
                raise TermError(f"IRI is not absolute: {self.value!r}")
            object.__setattr__(self, "_key", ("iri", self.value))
        elif self.kind == "blank":
            object.__setattr__(self, "_key", ("blank", self.value))
        elif self.kind == "literal":
            dt = self.datatype
            if self.language:
                dt = RDF_LANGSTRING
            elif dt is None:
                dt = XSD_STRING
            object.__setattr__(self, "datatype", dt)
            object.__setattr__(self, "_key", ("literal", dt, self.language, self._canonical()))
        else:
            raise TermError(f"unknown term kind: {self.kind!r}")

    def _canonical(self):
        """Comparison key for the lexical form: parsed value when supported."""
        dt = self.datatype
        if dt not in VALUE_DATATYPES:
            return self.value
        try:
            if dt == XSD_INTEGER:
                return int(self.value)
            if dt in (XSD_DOUBLE, XSD_FLOAT):
                return float(self.value)
            if dt == XSD_BOOLEAN:
                return _parse_boolean(self.value)
            if dt == XSD_DATETIME:
                return _parse_datetime(self.value)
        except ValueError:
            return self.value  # invalid lexical form: fall back to lexical identity
        return self.value

    def __eq__(self, other):
        return isinstance(other, Term) and self._key == other._key

    def __hash__(self):
        return hash(self._key)

    @property
    def is_iri(self) -> bool:
        return self.kind == "iri"

    @property
    def is_blank(self) -> bool:
        return self.kind == "blank"

    @property
    def is_literal(self) -> bool:
        return self.kind == "literal"

    def numeric_value(self) -> Union[int, float, None]:
        if self.kind != "literal" or self.datatype not in NUMERIC_DATATYPES:
            return None
        v = self._canonical()
        return v if isinstance(v, (int, float)) else None

    def python_value(self):
        """Native value for supported datatypes, else the lexical form."""
        if self.kind != "literal":
            return self.value
        return self._canonical()

    def n3(self) -> str:
        """N-Triples-style rendering, used in diagnostics and sorted outputs."""
        if self.kind == "iri":
            return f"<{self.value}>"
        if self.kind == "blank":
            return f"_:{self.value}"
        escaped = escape_string(self.value)
        if self.language:
            return f'"{escaped}"@{self.language}'
        if self.datatype == XSD_STRING:
            return f'"{escaped}"'
        return f'"{escaped}"^^<{self.datatype}>'

    def __repr__(self):
        return self.n3()


def iri(value: str) -> Term:
    return Term("iri", value)


def blank(label: str) -> Term:
    return Term("blank", label)


def literal(value, datatype: Optional[str] = None, language: Optional[str] = None) -> Term:
    """Build a literal from a lexical form or a native Python value."""
    if isinstance(value, bool):
        return Term("literal", "true" if value else "false", datatype or XSD_BOOLEAN)
    if isinstance(value, int):
        return Term("literal", str(value), datatype or XSD_INTEGER)
    if isinstance(value, float):
        return Term("literal", repr(value), datatype or XSD_DOUBLE)
    if isinstance(value, datetime):
        return Term("literal", value.isoformat(), datatype or XSD_DATETIME)
    return Term("literal", str(value), datatype, language)


def escape_string(text: str) -> str:
    out = []
    for ch in text:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"':
            out.append('\\"')
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\r":
            out.append("\\r")
        elif ch == "\t":
            out.append("\\t")
        else:
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class Quad:
    subject: Term
    predicate: Term
    object: Term
    graph: Term

    def __post_init__(self):
        if self.subject.is_literal:
            raise TermError("quad subject must not be a literal")
        if not self.predicate.is_iri:
            raise TermError("quad predicate must be an IRI")
        if not self.graph.is_iri:
            raise TermError("quad graph must be an IRI")

    def triple(self):
        return (self.subject, self.predicate, self.object)

    def __repr__(self):
        return f"{self.subject.n3()} {self.predicate.n3()} {self.object.n3()} {self.graph.n3()} ."


# Well-known graph names.
DEFAULT_GRAPH = iri("urn:kapps:default")
SHAPES_GRAPH = iri("urn:kapps:shapes")
ONTOLOGY_GRAPH = iri("urn:kapps:ontology")

A = iri(RDF_TYPE)


def quad(s: Term, p: Term, o: Term, g: Term = DEFAULT_GRAPH) -> Quad:
    return Quad(s, p, o, g)
