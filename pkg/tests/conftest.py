"""Shared fixtures and seeded generators for the oracle-equivalence suites."""

from __future__ import annotations

import random
import sys
from pathlib import Path
from typing import List

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kapps.terms import (
    DEFAULT_GRAPH,
    XSD_BOOLEAN,
    XSD_INTEGER,
    XSD_STRING,
    Quad,
    Term,
    iri,
    literal,
)

EX = "http://example.org/gen#"


def ex(name: str) -> Term:
    return iri(EX + name)


SUBJECTS = [ex(f"s{i}") for i in range(1, 9)]
PREDICATES = [ex(f"p{i}") for i in range(1, 4)]
NUMERIC_PREDICATE = ex("pnum")
LITERAL_POOL = [
    literal(0),
    literal(1),
    literal(2),
    literal(3),
    literal("a"),
    literal("b"),
    literal(True),
    literal(2.5),
]


def random_graph(rng: random.Random, max_quads: int = 100) -> List[Quad]:
    """Small random graph over a fixed vocabulary; pnum objects are always
    integers so ordering filters stay well-typed."""
    n = rng.randint(0, max_quads)
    quads = set()
    for _ in range(n):
        s = rng.choice(SUBJECTS)
        if rng.random() < 0.25:
            p = NUMERIC_PREDICATE
            o = literal(rng.randint(0, 5))
        else:
            p = rng.choice(PREDICATES)
            o = rng.choice(SUBJECTS) if rng.random() < 0.5 else rng.choice(LITERAL_POOL)
        quads.add(Quad(s, p, o, DEFAULT_GRAPH))
    return sorted(quads, key=lambda q: (q.subject.n3(), q.predicate.n3(), q.object.n3()))


def _literal_text(lit: Term) -> str:
    if lit.datatype == XSD_INTEGER:
        return lit.value
    if lit.datatype == XSD_STRING:
        return f'"{lit.value}"'
    if lit.datatype == XSD_BOOLEAN:
        return lit.value
    return lit.value  # doubles: decimal form maps back to xsd:double


def random_query_text(rng: random.Random) -> str:
    """Random supported query with at most three enumerable variables
    (x, y, n), so the brute-force oracle stays tractable."""
    used: List[str] = []

    def var(name: str) -> str:
        if name not in used:
            used.append(name)
        return f"?{name}"

    def subject_term() -> str:
        return var(rng.choice("xy")) if rng.random() < 0.5 else f"<{rng.choice(SUBJECTS).value}>"

    def object_term() -> str:
        roll = rng.random()
        if roll < 0.45:
            return var(rng.choice("xy"))
        if roll < 0.7:
            return f"<{rng.choice(SUBJECTS).value}>"
        return _literal_text(rng.choice(LITERAL_POOL))

    clauses = []
    for _ in range(rng.randint(1, 2)):
        predicate = rng.choice(PREDICATES)
        clauses.append(f"{subject_term()} <{predicate.value}> {object_term()} .")

    if rng.random() < 0.35:  # ordering filter over the always-integer predicate
        clauses.append(f"{subject_term()} <{NUMERIC_PREDICATE.value}> {var('n')} .")
        op = rng.choice(["=", "!=", "<", "<=", ">", ">="])
        clauses.append(f"FILTER (?n {op} {rng.randint(0, 5)})")

    has_count = rng.random() < 0.35
    if has_count:
        outer = rng.choice("xy")
        var(outer)
        predicate = rng.choice(PREDICATES + [NUMERIC_PREDICATE])
        clauses.append(
            "{ SELECT ?%s (COUNT(?w) AS ?c) WHERE { ?%s <%s> ?w . } GROUP BY ?%s }"
            % (outer, outer, predicate.value, outer)
        )
        if rng.random() < 0.6:
            op = rng.choice(["=", "!=", "<", "<=", ">", ">="])
            clauses.append(f"FILTER (?c {op} {rng.randint(0, 3)})")

    if not used:
        clauses.insert(0, f"{var('x')} <{rng.choice(PREDICATES).value}> {object_term()} .")

    where = "\n".join(clauses)
    if rng.random() < 0.2:
        return f"ASK {{ {where} }}"
    pool = list(used)
    if has_count and rng.random() < 0.5:
        pool.append("c")
    projected = rng.sample(pool, rng.randint(1, min(2, len(pool))))
    return "SELECT %s WHERE { %s }" % (" ".join(f"?{v}" for v in projected), where)


@pytest.fixture
def rng():
    return random.Random(20240901)


# random SHACL cases: a data graph, a shapes document, and a neutral
# description the naive oracle validates from

SHACL_CLASSES = [ex("C1"), ex("C2"), ex("C3")]
OBJECT_PROPS = [ex("op1"), ex("op2")]
DATA_PROPS = [ex("dp1"), ex("dp2")]
STATE_PROP = ex("sp")
HOP_PROP = ex("hp")
XSD = "http://www.w3.org/2001/XMLSchema#"
DATATYPES = [XSD + "string", XSD + "integer", XSD + "double", XSD + "boolean"]


def random_shacl_case(rng: random.Random, max_quads: int = 200):
    from oracles import NaiveProperty, NaiveShape, NaiveSparql

    from kapps.terms import RDF_TYPE, RDFS_SUBCLASSOF

    instances = [ex(f"i{k}") for k in range(1, rng.randint(4, 11))]
    quads = set()

    def add(s, p, o):
        if len(quads) < max_quads:
            quads.add(Quad(s, p, o, DEFAULT_GRAPH))

    if rng.random() < 0.5:
        add(SHACL_CLASSES[1], iri(RDFS_SUBCLASSOF), SHACL_CLASSES[0])
    if rng.random() < 0.3:
        add(SHACL_CLASSES[2], iri(RDFS_SUBCLASSOF), SHACL_CLASSES[1])

    literal_pool = [
        literal("v"),
        literal(1),
        literal(2.5),
        literal(False),
        literal("w"),
        literal(7),
    ]
    for inst in instances:
        for _ in range(rng.randint(0, 2)):
            add(inst, iri(RDF_TYPE), rng.choice(SHACL_CLASSES))
        for prop in OBJECT_PROPS:
            for _ in range(rng.randint(0, 2)):
                value = rng.choice(instances) if rng.random() < 0.8 else rng.choice(literal_pool)
                add(inst, prop, value)
        for prop in DATA_PROPS:
            for _ in range(rng.randint(0, 2)):
                add(inst, prop, rng.choice(literal_pool))
        if rng.random() < 0.5:
            add(inst, STATE_PROP, rng.choice(instances))
        if rng.random() < 0.4:
            add(inst, HOP_PROP, rng.choice(instances))

    shape_lines = [
        "@prefix sh: <http://www.w3.org/ns/shacl#> .",
        "@prefix rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#> .",
        "@prefix xsd: <http://www.w3.org/2001/XMLSchema#> .",
        f"@prefix ex: <{EX}> .",
    ]
    naive_shapes = []
    all_props = OBJECT_PROPS + DATA_PROPS + [STATE_PROP, HOP_PROP]
    for index in range(rng.randint(1, 3)):
        target = rng.choice(SHACL_CLASSES)
        shape = NaiveShape(target_class=target)
        parts = [f"ex:Shape{index + 1} rdf:type sh:NodeShape ;",
                 f"    sh:targetClass <{target.value}> "]
        for _ in range(rng.randint(1, 2)):
            kind = rng.choice(
                ["maxCount", "minCount", "datatype", "class", "nodeKind", "sparql"]
            )
            if kind == "sparql":
                template = rng.choice(["exactly-one", "forbidden-pair"])
                if template == "exactly-one":
                    path = rng.choice(OBJECT_PROPS)
                    select = (
                        "SELECT $this WHERE { $this <%s> ?s . "
                        "{ SELECT $this (COUNT(?v) AS ?c) WHERE { $this <%s> ?v . } GROUP BY $this } "
                        "FILTER (?c != 1) }" % (STATE_PROP.value, path.value)
                    )
                    shape.sparqls.append(
                        NaiveSparql(template="exactly-one", guard=STATE_PROP, path=path)
                    )
                else:
                    path = rng.choice(OBJECT_PROPS)
                    select = (
                        "SELECT $this WHERE { $this <%s> ?x . ?x <%s> ?y . }"
                        % (path.value, HOP_PROP.value)
                    )
                    shape.sparqls.append(
                        NaiveSparql(template="forbidden-pair", path=path, second=HOP_PROP)
                    )
                parts.append(
                    ';\n    sh:sparql [ sh:message "cross-entity rule" ;\n'
                    f'        sh:select """{select}""" ] '
                )
            else:
                prop = rng.choice(all_props)
                naive = NaiveProperty(path=prop)
                constraint_lines = [f"    sh:property [ sh:path <{prop.value}> "]
                if kind == "maxCount":
                    naive.max_count = rng.randint(0, 2)
                    constraint_lines.append(
                        f'; sh:maxCount "{naive.max_count}"^^xsd:integer '
                    )
                elif kind == "minCount":
                    naive.min_count = rng.randint(1, 2)
                    constraint_lines.append(
                        f'; sh:minCount "{naive.min_count}"^^xsd:integer '
                    )
                elif kind == "datatype":
                    dt = rng.choice(DATATYPES)
                    naive.datatype = dt
                    constraint_lines.append(f"; sh:datatype <{dt}> ")
                elif kind == "class":
                    cls = rng.choice(SHACL_CLASSES)
                    naive.class_iri = cls
                    constraint_lines.append(f"; sh:class <{cls.value}> ")
                else:
                    nk = rng.choice(["IRI", "Literal"])
                    naive.node_kind = nk
                    constraint_lines.append(f"; sh:nodeKind sh:{nk} ")
                constraint_lines.append('; sh:message "property rule" ]')
                parts.append(";\n" + "".join(constraint_lines))
                shape.properties.append(naive)
        shape_lines.append("".join(parts) + " .")
        naive_shapes.append(shape)
    return sorted(quads, key=repr), "\n".join(shape_lines), naive_shapes
