"""SHACL subset: shape extraction from the shapes graph, candidate-state
validation, and the admission gate wired into the store's write path.

Structural checks cover maxCount, minCount, datatype, class, and nodeKind on
single-predicate paths; cross-entity conditions run as SHACL-SPARQL selects
with `$this` pre-bound per focus node. Any returned solution is a violation.
A SPARQL constraint whose aggregate groups solely on `$this` additionally
yields a zero-count row when the focus node has no matches, so an
"exactly one" filter catches the zero case (standard group semantics would
silently pass it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

from . import sparql, turtle
from .store import StoreSnapshot, TransactionDelta, overlay
from .terms import (
    RDF,
    RDF_TYPE,
    RDFS_SUBCLASSOF,
    SH,
    XSD,
    Quad,
    Term,
    blank,
    iri,
    literal,
)

SH_NODE_SHAPE = iri(SH + "NodeShape")
SH_PROPERTY_SHAPE = iri(SH + "PropertyShape")
SH_VALIDATION_REPORT = iri(SH + "ValidationReport")
SH_VALIDATION_RESULT = iri(SH + "ValidationResult")
SH_VIOLATION = iri(SH + "Violation")

MAX_COUNT_COMPONENT = SH + "MaxCountConstraintComponent"
MIN_COUNT_COMPONENT = SH + "MinCountConstraintComponent"
DATATYPE_COMPONENT = SH + "DatatypeConstraintComponent"
CLASS_COMPONENT = SH + "ClassConstraintComponent"
NODEKIND_COMPONENT = SH + "NodeKindConstraintComponent"
SPARQL_COMPONENT = SH + "SPARQLConstraintComponent"

COMPONENT_VOCABULARY = frozenset(
    [
        MAX_COUNT_COMPONENT,
        MIN_COUNT_COMPONENT,
        DATATYPE_COMPONENT,
        CLASS_COMPONENT,
        NODEKIND_COMPONENT,
        SPARQL_COMPONENT,
    ]
)

REPORT_PREFIXES = {
    "sh": SH,
    "rdf": RDF,
    "xsd": XSD,
    "fc": "http://w3id.org/circularfactory/FlexConveyor#",
    "fci": "http://w3id.org/circularfactory/FlexConveyorInstances#",
}

_RDF4J = "http://rdf4j.org/schema/rdf4j#"
_RDF4J_SH = "http://rdf4j.org/shacl-extensions#"


class UnsupportedComponent(ValueError):
    def __init__(self, component: str, shape: Term):
        super().__init__(f"unsupported SHACL component {component} on shape {shape.n3()}")
        self.component = component
        self.shape = shape


@dataclass
class PropertyConstraint:
    path: Term
    max_count: Optional[int] = None
    min_count: Optional[int] = None
    datatype: Optional[Term] = None
    class_iri: Optional[Term] = None
    node_kind: Optional[Term] = None
    message: Optional[str] = None
    shape_node: Term = field(default_factory=lambda: blank("pshape"))


@dataclass
class SparqlConstraint:
    select_text: str
    query: sparql.Query
    message: str
    prefixes: Dict[str, str]


@dataclass
class Shape:
    id: Term
    target_classes: List[Term]
    properties: List[PropertyConstraint] = field(default_factory=list)
    sparql_constraints: List[SparqlConstraint] = field(default_factory=list)
    severity: Term = SH_VIOLATION


@dataclass
class ShapeSet:
    shapes: List[Shape] = field(default_factory=list)

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self):
        return len(self.shapes)


@dataclass(frozen=True)
class ValidationResult:
    focus_node: Term
    result_path: Optional[Term]
    component: str
    severity: Term
    message: str
    source_shape: Term

    def sort_key(self):
        return (
            self.focus_node.n3(),
            self.component,
            self.result_path.n3() if self.result_path else "",
            self.message,
        )


@dataclass
class ValidationReport:
    conforms: bool
    results: List[ValidationResult]
    # property-shape descriptions serialized alongside results, per Listing-2
    # report structure
    shape_details: Dict[Term, PropertyConstraint] = field(default_factory=dict)

    def components(self) -> Set[str]:
        return {r.component for r in self.results}


_ALLOWED_NODE_PREDICATES = {
    RDF_TYPE,
    SH + "targetClass",
    SH + "property",
    SH + "sparql",
    SH + "severity",
    SH + "message",
    SH + "name",
    SH + "description",
}

_ALLOWED_PROPERTY_PREDICATES = {
    RDF_TYPE,
    SH + "path",
    SH + "maxCount",
    SH + "minCount",
    SH + "datatype",
    SH + "class",
    SH + "nodeKind",
    SH + "message",
    SH + "severity",
    SH + "name",
    SH + "description",
}


def load_shapes(view: StoreSnapshot, shapes_graph: Term) -> ShapeSet:
    """Extract every sh:NodeShape in the named shapes graph.

    Unsupported constraint parameters are a hard error: silently skipping a
    constraint in an admission gate would mean admitting states the shape
    author meant to forbid.
    """

    def objects(s: Term, p: str) -> List[Term]:
        return sorted(
            (q.object for q in view.match(s, iri(p), None, shapes_graph)),
            key=lambda t: t.n3(),
        )

    shape_set = ShapeSet()
    shape_ids = sorted(
        {q.subject for q in view.match(None, iri(RDF_TYPE), SH_NODE_SHAPE, shapes_graph)},
        key=lambda t: t.n3(),
    )
    for shape_id in shape_ids:
        for q in view.match(shape_id, None, None, shapes_graph):
            if q.predicate.value not in _ALLOWED_NODE_PREDICATES:
                raise UnsupportedComponent(q.predicate.value, shape_id)
        shape = Shape(id=shape_id, target_classes=objects(shape_id, SH + "targetClass"))
        severities = objects(shape_id, SH + "severity")
        if severities:
            shape.severity = severities[0]
        for pnode in objects(shape_id, SH + "property"):
            shape.properties.append(_parse_property(view, shapes_graph, shape_id, pnode))
        for snode in objects(shape_id, SH + "sparql"):
            shape.sparql_constraints.append(_parse_sparql(view, shapes_graph, shape_id, snode))
        shape_set.shapes.append(shape)
    return shape_set


def _parse_property(view, graph, shape_id, pnode) -> PropertyConstraint:
    def one(p: str) -> Optional[Term]:
        values = [q.object for q in view.match(pnode, iri(p), None, graph)]
        return values[0] if values else None

    for q in view.match(pnode, None, None, graph):
        if q.predicate.value not in _ALLOWED_PROPERTY_PREDICATES:
            raise UnsupportedComponent(q.predicate.value, shape_id)
    path = one(SH + "path")
    if path is None or not path.is_iri:
        raise UnsupportedComponent(SH + "path (missing or non-IRI)", shape_id)
    constraint = PropertyConstraint(path=path, shape_node=pnode)
    max_count = one(SH + "maxCount")
    if max_count is not None:
        constraint.max_count = int(max_count.value)
    min_count = one(SH + "minCount")
    if min_count is not None:
        constraint.min_count = int(min_count.value)
    constraint.datatype = one(SH + "datatype")
    constraint.class_iri = one(SH + "class")
    constraint.node_kind = one(SH + "nodeKind")
    message = one(SH + "message")
    if message is not None:
        constraint.message = message.value
    return constraint


def _parse_sparql(view, graph, shape_id, snode) -> SparqlConstraint:
    def one(p: str) -> Optional[Term]:
        values = [q.object for q in view.match(snode, iri(p), None, graph)]
        return values[0] if values else None

    select = one(SH + "select")
    if select is None:
        raise UnsupportedComponent(SH + "select (missing)", shape_id)
    prefixes: Dict[str, str] = {}
    for pref_node in (q.object for q in view.match(snode, iri(SH + "prefixes"), None, graph)):
        for decl in (q.object for q in view.match(pref_node, iri(SH + "declare"), None, graph)):
            name = one_of(view, graph, decl, SH + "prefix")
            namespace = one_of(view, graph, decl, SH + "namespace")
            if name is not None and namespace is not None:
                prefixes[name.value] = namespace.value
    header = "".join(f"PREFIX {p}: <{ns}>\n" for p, ns in sorted(prefixes.items()))
    query = sparql.parse_query(header + select.value)
    if query.form != "SELECT" or "this" not in {v.name for v in query.variables()}:
        raise UnsupportedComponent(SH + "select (must project $this)", shape_id)
    message = one(SH + "message")
    return SparqlConstraint(
        select_text=select.value,
        query=query,
        message=message.value if message else "SPARQL constraint violated.",
        prefixes=prefixes,
    )


def one_of(view, graph, subject, predicate) -> Optional[Term]:
    values = [q.object for q in view.match(subject, iri(predicate), None, graph)]
    return values[0] if values else None


def subclass_closure(view: StoreSnapshot) -> Dict[Term, Set[Term]]:
    """class -> set of classes whose instances count as instances of it."""
    direct: Dict[Term, Set[Term]] = {}
    for q in view.match(None, iri(RDFS_SUBCLASSOF), None, None):
        if q.object.is_iri or q.object.is_blank:
            direct.setdefault(q.object, set()).add(q.subject)
    closure: Dict[Term, Set[Term]] = {}

    def descend(cls: Term) -> Set[Term]:
        if cls in closure:
            return closure[cls]
        closure[cls] = {cls}
        stack = [cls]
        while stack:
            current = stack.pop()
            for sub in direct.get(current, ()):
                if sub not in closure[cls]:
                    closure[cls].add(sub)
                    stack.append(sub)
        return closure[cls]

    for cls in list(direct):
        descend(cls)
    return closure


def instances_of(view: StoreSnapshot, cls: Term, closure: Dict[Term, Set[Term]]) -> Set[Term]:
    out: Set[Term] = set()
    for c in closure.get(cls, {cls}):
        out.update(q.subject for q in view.match(None, iri(RDF_TYPE), c, None))
    return out


def validate(
    candidate: StoreSnapshot,
    shapes: ShapeSet,
    focus_scope: Optional[Set[Term]] = None,
) -> ValidationReport:
    """Validate a candidate state. `focus_scope`, when given, restricts
    property-constraint checking to the listed focus nodes; SPARQL-backed
    shapes are always checked in full since their queries can reach arbitrary
    nodes.
    """
    closure = subclass_closure(candidate)
    results: Set[ValidationResult] = set()
    details: Dict[Term, PropertyConstraint] = {}
    for shape in shapes:
        focus_nodes: Set[Term] = set()
        for target in shape.target_classes:
            focus_nodes |= instances_of(candidate, target, closure)
        property_focus = focus_nodes
        if focus_scope is not None:
            property_focus = focus_nodes & focus_scope
        for constraint in shape.properties:
            for focus in property_focus:
                for result in _check_property(candidate, shape, constraint, focus, closure):
                    results.add(result)
                    details[constraint.shape_node] = constraint
        for constraint in shape.sparql_constraints:
            for focus in focus_nodes:
                rows = sparql.evaluate(
                    constraint.query,
                    candidate,
                    initial={"this": focus},
                    default_zero_groups=True,
                )
                for _ in rows:
                    results.add(
                        ValidationResult(
                            focus_node=focus,
                            result_path=None,
                            component=SPARQL_COMPONENT,
                            severity=shape.severity,
                            message=constraint.message,
                            source_shape=shape.id,
                        )
                    )
    ordered = sorted(results, key=ValidationResult.sort_key)
    used_details = {
        r.source_shape: details[r.source_shape] for r in ordered if r.source_shape in details
    }
    return ValidationReport(conforms=not ordered, results=ordered, shape_details=used_details)


def _check_property(view, shape, constraint, focus, closure):
    values = [q.object for q in view.match(focus, constraint.path, None, None)]
    path = constraint.path
    if constraint.max_count is not None and len(values) > constraint.max_count:
        yield _result(
            focus, path, MAX_COUNT_COMPONENT, shape, constraint,
            f"Property {path.value} has {len(values)} values, more than {constraint.max_count}.",
        )
    if constraint.min_count is not None and len(values) < constraint.min_count:
        yield _result(
            focus, path, MIN_COUNT_COMPONENT, shape, constraint,
            f"Property {path.value} has {len(values)} values, fewer than {constraint.min_count}.",
        )
    if constraint.datatype is not None:
        for value in values:
            if not value.is_literal or value.datatype != constraint.datatype.value:
                yield _result(
                    focus, path, DATATYPE_COMPONENT, shape, constraint,
                    f"Value of {path.value} is not a {constraint.datatype.value} literal.",
                )
    if constraint.class_iri is not None:
        accepted = closure.get(constraint.class_iri, {constraint.class_iri})
        for value in values:
            if value.is_literal or not any(
                True for q in view.match(value, iri(RDF_TYPE), None, None) if q.object in accepted
            ):
                yield _result(
                    focus, path, CLASS_COMPONENT, shape, constraint,
                    f"Value of {path.value} is not an instance of {constraint.class_iri.value}.",
                )
    if constraint.node_kind is not None:
        kind = constraint.node_kind.value
        for value in values:
            ok = (
                (kind == SH + "IRI" and value.is_iri)
                or (kind == SH + "Literal" and value.is_literal)
                or (kind == SH + "BlankNode" and value.is_blank)
            )
            if not ok:
                yield _result(
                    focus, path, NODEKIND_COMPONENT, shape, constraint,
                    f"Value of {path.value} is not of node kind {kind}.",
                )


def _result(focus, path, component, shape, constraint, default_message):
    return ValidationResult(
        focus_node=focus,
        result_path=path,
        component=component,
        severity=shape.severity,
        message=constraint.message or default_message,
        source_shape=constraint.shape_node,
    )


def blocking(report: ValidationReport) -> bool:
    """Only sh:Violation results block admission; warnings and infos pass."""
    return any(r.severity == SH_VIOLATION for r in report.results)


def admission_gate(
    base: StoreSnapshot, delta: TransactionDelta, shapes: ShapeSet
) -> Optional[ValidationReport]:
    """Gate hook for the store: validate the virtual post-state of `delta`."""
    candidate = overlay(base, delta)
    report = validate(candidate, shapes)
    if report.conforms or not blocking(report):
        return None
    return report


def make_gate(shapes: ShapeSet):
    def gate(base: StoreSnapshot, delta: TransactionDelta):
        return admission_gate(base, delta, shapes)

    return gate


def serialize_report(
    report: ValidationReport,
    prefixes: Optional[Dict[str, str]] = None,
    vendor_compat: bool = False,
) -> str:
    """Deterministic Turtle for a validation report.

    `vendor_compat` adds the rdf4j bookkeeping triples some backends emit;
    they are off by default because the shapes themselves carry no
    vendor-specific vocabulary.
    """
    prefix_map = dict(REPORT_PREFIXES)
    if prefixes:
        prefix_map.update(prefixes)
    if vendor_compat:
        prefix_map["rdf4j"] = _RDF4J
        prefix_map["rdf4j-sh"] = _RDF4J_SH

    statements = set()
    report_node = blank("report")
    statements.add((report_node, iri(RDF_TYPE), SH_VALIDATION_REPORT))
    statements.add((report_node, iri(SH + "conforms"), literal(report.conforms)))
    if vendor_compat:
        statements.add((report_node, iri(_RDF4J + "truncated"), literal(False)))

    shape_nodes: Dict[Term, Term] = {}
    for i, result in enumerate(sorted(report.results, key=ValidationResult.sort_key), start=1):
        rnode = blank(f"result{i}")
        statements.add((report_node, iri(SH + "result"), rnode))
        statements.add((rnode, iri(RDF_TYPE), SH_VALIDATION_RESULT))
        statements.add((rnode, iri(SH + "focusNode"), result.focus_node))
        if result.result_path is not None:
            statements.add((rnode, iri(SH + "resultPath"), result.result_path))
        statements.add((rnode, iri(SH + "sourceConstraintComponent"), iri(result.component)))
        statements.add((rnode, iri(SH + "resultSeverity"), result.severity))
        statements.add((rnode, iri(SH + "resultMessage"), literal(result.message)))
        statements.add((rnode, iri(SH + "sourceShape"), result.source_shape))
        shape_nodes[result.source_shape] = result.source_shape
        if vendor_compat:
            statements.add((rnode, iri(_RDF4J_SH + "shapesGraph"), iri(_RDF4J + "SHACLShapeGraph")))

    for source, constraint in report.shape_details.items():
        statements.add((source, iri(RDF_TYPE), SH_PROPERTY_SHAPE))
        statements.add((source, iri(SH + "path"), constraint.path))
        if constraint.max_count is not None:
            statements.add((source, iri(SH + "maxCount"), literal(constraint.max_count)))
        if constraint.min_count is not None:
            statements.add((source, iri(SH + "minCount"), literal(constraint.min_count)))
        if constraint.datatype is not None:
            statements.add((source, iri(SH + "datatype"), constraint.datatype))
        if constraint.class_iri is not None:
            statements.add((source, iri(SH + "class"), constraint.class_iri))
        if constraint.node_kind is not None:
            statements.add((source, iri(SH + "nodeKind"), constraint.node_kind))
        if constraint.message is not None:
            statements.add((source, iri(SH + "message"), literal(constraint.message)))

    return turtle.serialize(statements, prefix_map)


def parse_report(text: str) -> ValidationReport:
    """Re-read a serialized report (used by callers that receive one over the
    wire and need the violated components)."""
    doc = turtle.parse(text)
    by_subject: Dict[Term, Dict[str, List[Term]]] = {}
    for s, p, o in doc.statements:
        by_subject.setdefault(s, {}).setdefault(p.value, []).append(o)
    conforms = True
    results = []
    for subject, props in by_subject.items():
        types = props.get(RDF_TYPE, [])
        if SH_VALIDATION_REPORT in types:
            conforms_values = props.get(SH + "conforms", [])
            conforms = bool(conforms_values and conforms_values[0].python_value() is True)
        if SH_VALIDATION_RESULT in types:
            results.append(
                ValidationResult(
                    focus_node=props[SH + "focusNode"][0],
                    result_path=props.get(SH + "resultPath", [None])[0],
                    component=props[SH + "sourceConstraintComponent"][0].value,
                    severity=props.get(SH + "resultSeverity", [SH_VIOLATION])[0],
                    message=props[SH + "resultMessage"][0].value,
                    source_shape=props.get(SH + "sourceShape", [blank("unknown")])[0],
                )
            )
    results.sort(key=ValidationResult.sort_key)
    return ValidationReport(conforms=conforms, results=results)
