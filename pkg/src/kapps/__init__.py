"""Knowledge-graph runtime: an ontology-governed RDF quad store operated as
write-authoritative system state, with SHACL validation gating every change,
an object-graph mapper as the single validated write path, service-discovery
middleware, and two executable demonstrators."""

from .ogm import (
    BoundaryViolation,
    ClassSchema,
    CommitRejected,
    GraphObject,
    ObjectRef,
    Ogm,
    ScopeSpec,
)
from .runtime import Runtime
from .shacl import ShapeSet, ValidationReport, admission_gate, load_shapes, serialize_report, validate
from .sparql import evaluate, parse_query
from .store import (
    HistoryEntry,
    QuadStore,
    StoreSnapshot,
    TransactionDelta,
    TransactionRejected,
)
from .terms import Quad, Term, blank, iri, literal
from .turtle import TurtleParseError, parse, serialize

__all__ = [
    "BoundaryViolation",
    "ClassSchema",
    "CommitRejected",
    "GraphObject",
    "HistoryEntry",
    "ObjectRef",
    "Ogm",
    "Quad",
    "QuadStore",
    "Runtime",
    "ScopeSpec",
    "ShapeSet",
    "StoreSnapshot",
    "Term",
    "TransactionDelta",
    "TransactionRejected",
    "TurtleParseError",
    "ValidationReport",
    "admission_gate",
    "blank",
    "evaluate",
    "iri",
    "literal",
    "load_shapes",
    "parse",
    "parse_query",
    "serialize",
    "serialize_report",
    "validate",
]
