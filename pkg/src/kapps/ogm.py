"""Object-graph mapper: the single validated write path into the store.

Schemas are derived from the live ontology on demand (domain/range typing,
subclass inheritance, OWL cardinality restrictions) and cached against the
ontology graph's transaction version, so an ontology update is visible on the
next fetch with no regeneration step. Single-entity rules (datatype,
maxCardinality, property admissibility) are enforced at the object boundary
before any delta is built; cross-entity rules stay with the SHACL gate at the
store.

Entity deletion is intentionally unsupported: rdf:type assertions are never
retracted, only property values change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from .shacl import subclass_closure
from .store import QuadStore, StoreSnapshot, TransactionDelta, TransactionRejected
from .terms import (
    OWL,
    PROV,
    RDF_TYPE,
    RDFS_DOMAIN,
    RDFS_RANGE,
    RDFS_SUBCLASSOF,
    XSD,
    XSD_ANYURI,
    XSD_BOOLEAN,
    XSD_DATETIME,
    XSD_DOUBLE,
    XSD_INTEGER,
    XSD_STRING,
    DEFAULT_GRAPH,
    ONTOLOGY_GRAPH,
    Quad,
    Term,
    iri,
    literal,
)

OWL_CLASS = iri(OWL + "Class")
OWL_RESTRICTION = iri(OWL + "Restriction")
OWL_OBJECT_PROPERTY = iri(OWL + "ObjectProperty")
OWL_DATATYPE_PROPERTY = iri(OWL + "DatatypeProperty")

DEFAULT_ACTOR = iri("urn:kapps:system")

# Classes whose instances carry a qualified activity description on commit.
PROVENANCE_CLASSES = frozenset(
    [
        iri("http://w3id.org/circularfactory/Core#Operation"),
        iri("http://w3id.org/circularfactory/Core#Observation"),
    ]
)


class OgmError(Exception):
    pass


class UnknownClass(OgmError):
    pass


class UnknownInstance(OgmError):
    pass


class BoundaryViolation(OgmError):
    """Single-entity rule broken at the object boundary (no store contact)."""


class SchemaViolation(OgmError):
    """Graph data inconsistent with the ontology-declared schema."""


@dataclass(frozen=True)
class PropertySpec:
    iri: Term
    kind: str  # 'object' | 'data'
    range_class: Optional[Term] = None
    datatype: Optional[str] = None
    max_cardinality: Optional[int] = None
    min_cardinality: Optional[int] = None


@dataclass
class ClassSchema:
    class_iri: Term
    super_classes: Set[Term]
    properties: Dict[Term, PropertySpec]

    def spec(self, prop: Term) -> PropertySpec:
        if prop not in self.properties:
            raise BoundaryViolation(
                f"property {prop.value} is not admissible on {self.class_iri.value}"
            )
        return self.properties[prop]


@dataclass
class ScopeSpec:
    depth: int = 0
    include_properties: Optional[Set[Term]] = None
    follow_object_properties: bool = True

    def follows(self, prop: Term) -> bool:
        if not self.follow_object_properties or self.depth <= 0:
            return False
        return self.include_properties is None or prop in self.include_properties

    def narrowed(self) -> "ScopeSpec":
        return ScopeSpec(self.depth - 1, self.include_properties, self.follow_object_properties)


@dataclass
class ObjectRef:
    iri: Term
    resolved: Optional["GraphObject"] = None

    def __repr__(self):
        state = "resolved" if self.resolved else "ref"
        return f"<{state} {self.iri.value}>"


Value = Union[Term, ObjectRef, "GraphObject"]


class GraphObject:
    """Scope-bounded, schema-validated materialization of one instance."""

    def __init__(self, iri_: Term, schema: ClassSchema, new: bool = False):
        self.iri = iri_
        self.schema = schema
        self.values: Dict[Term, List[Value]] = {}
        self.dirty: Set[Term] = set()
        self.new = new

    @property
    def class_iri(self) -> Term:
        return self.schema.class_iri

    def get(self, prop: Term) -> List[Value]:
        return list(self.values.get(prop, []))

    def get_one(self, prop: Term):
        values = self.values.get(prop, [])
        return values[0] if values else None

    def set(self, prop: Term, values: Union[Value, Sequence[Value], None]):
        """Replace the full value list of a property (boundary-checked)."""
        spec = self.schema.spec(prop)
        if values is None:
            values = []
        elif isinstance(values, (Term, ObjectRef, GraphObject)) or not isinstance(values, (list, tuple)):
            values = [values]
        coerced = [self._coerce(spec, v) for v in values]
        if spec.max_cardinality is not None and len(coerced) > spec.max_cardinality:
            raise BoundaryViolation(
                f"{prop.value} on {self.iri.value} allows at most "
                f"{spec.max_cardinality} values, got {len(coerced)}"
            )
        self.values[prop] = coerced
        self.dirty.add(prop)

    def add(self, prop: Term, value: Value):
        """Append one value (boundary-checked against maxCardinality)."""
        spec = self.schema.spec(prop)
        coerced = self._coerce(spec, value)
        current = self.values.get(prop, [])
        if spec.max_cardinality is not None and len(current) + 1 > spec.max_cardinality:
            raise BoundaryViolation(
                f"{prop.value} on {self.iri.value} allows at most {spec.max_cardinality} values"
            )
        self.values[prop] = current + [coerced]
        self.dirty.add(prop)

    def _coerce(self, spec: PropertySpec, value) -> Value:
        if spec.kind == "object":
            if isinstance(value, (GraphObject, ObjectRef)):
                return value
            if isinstance(value, Term):
                if value.is_literal:
                    raise BoundaryViolation(
                        f"object property {spec.iri.value} cannot hold a literal"
                    )
                return value
            if isinstance(value, str):
                return iri(value)
            raise BoundaryViolation(
                f"object property {spec.iri.value} cannot hold {type(value).__name__}"
            )
        return _coerce_datatype(spec, value)

    def term_values(self, prop: Term) -> List[Term]:
        out = []
        for v in self.values.get(prop, []):
            if isinstance(v, GraphObject):
                out.append(v.iri)
            elif isinstance(v, ObjectRef):
                out.append(v.iri)
            else:
                out.append(v)
        return out

    def __repr__(self):
        flags = " new" if self.new else ""
        return f"<GraphObject {self.iri.value} : {self.class_iri.value}{flags}>"


_DATATYPE_PYTHON = {
    XSD_STRING: str,
    XSD_INTEGER: int,
    XSD_BOOLEAN: bool,
    XSD_DOUBLE: float,
    XSD + "float": float,
    XSD_DATETIME: datetime,
    XSD_ANYURI: str,
}


def _coerce_datatype(spec: PropertySpec, value) -> Term:
    datatype = spec.datatype or XSD_STRING
    if isinstance(value, Term):
        if not value.is_literal:
            raise BoundaryViolation(f"data property {spec.iri.value} requires a literal")
        if value.datatype != datatype:
            raise BoundaryViolation(
                f"{spec.iri.value} requires {datatype}, got {value.datatype}"
            )
        return value
    expected = _DATATYPE_PYTHON.get(datatype)
    if expected is None:
        # Unknown datatype: accept strings verbatim under the declared type.
        if isinstance(value, str):
            return literal(value, datatype)
        raise BoundaryViolation(f"{spec.iri.value}: cannot coerce {value!r} to {datatype}")
    if expected is bool and not isinstance(value, bool):
        raise BoundaryViolation(f"{spec.iri.value} requires a boolean, got {value!r}")
    if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise BoundaryViolation(f"{spec.iri.value} requires an integer, got {value!r}")
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BoundaryViolation(f"{spec.iri.value} requires a number, got {value!r}")
        value = float(value)
    if expected is str and not isinstance(value, str):
        raise BoundaryViolation(f"{spec.iri.value} requires a string, got {value!r}")
    if expected is datetime and not isinstance(value, datetime):
        raise BoundaryViolation(f"{spec.iri.value} requires a datetime, got {value!r}")
    return literal(value, datatype)


class CommitRejected(OgmError):
    """Commit vetoed by the admission gate; carries the validation report."""

    def __init__(self, report):
        super().__init__("commit rejected by admission gate")
        self.report = report


class Ogm:
    """Mapper bound to one store; each service holds its own with its actor."""

    def __init__(
        self,
        store: QuadStore,
        actor: Term = DEFAULT_ACTOR,
        data_graph: Term = DEFAULT_GRAPH,
        clock: Optional[Callable[[], datetime]] = None,
    ):
        self.store = store
        self.actor = actor
        self.data_graph = data_graph
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self._schema_cache: Dict[Tuple[Term, int], ClassSchema] = {}
        self._activity_seq = 0

    # schema derivation

    def derive_schema(self, class_iri: Term, view: Optional[StoreSnapshot] = None) -> ClassSchema:
        """Schema for a class, cached per ontology-graph version.

        Explicit views (e.g. historical snapshots) bypass the cache so the
        schema always reflects exactly the ontology visible in that view.
        """
        if view is not None:
            return derive_schema(class_iri, view)
        cache_key = (class_iri, self.store.graph_version(ONTOLOGY_GRAPH))
        cached = self._schema_cache.get(cache_key)
        if cached is None:
            cached = derive_schema(class_iri, self.store.snapshot())
            self._schema_cache[cache_key] = cached
        return cached

    # fetch / create / expand

    def fetch(
        self,
        iri_: Term,
        class_iri: Term,
        scope: Optional[ScopeSpec] = None,
        view: Optional[StoreSnapshot] = None,
    ) -> GraphObject:
        live = view is None
        view = view or self.store.snapshot()
        scope = scope or ScopeSpec()
        return self._fetch(iri_, class_iri, scope, view, live)

    def _fetch(
        self, iri_: Term, class_iri: Term, scope: ScopeSpec, view: StoreSnapshot, live: bool
    ) -> GraphObject:
        schema = self.derive_schema(class_iri) if live else derive_schema(class_iri, view)
        asserted = {q.object for q in view.match(iri_, iri(RDF_TYPE), None, None)}
        if not asserted:
            raise UnknownInstance(f"no rdf:type assertion for {iri_.value}")
        closure = subclass_closure(view)
        acceptable = closure.get(class_iri, {class_iri})
        if not (asserted & acceptable):
            raise UnknownInstance(
                f"{iri_.value} is not typed as {class_iri.value} or a subclass"
            )
        obj = GraphObject(iri_, schema)
        for prop, spec in schema.properties.items():
            quads = list(view.match(iri_, prop, None, None))
            if not quads:
                continue
            values: List[Value] = []
            for q in sorted(quads, key=lambda q: q.object.n3()):
                if spec.kind == "data":
                    if not q.object.is_literal or (
                        spec.datatype and q.object.datatype != spec.datatype
                    ):
                        raise SchemaViolation(
                            f"{iri_.value} {prop.value}: graph value {q.object.n3()} does not "
                            f"match declared datatype {spec.datatype}"
                        )
                    values.append(q.object)
                else:
                    if q.object.is_literal:
                        raise SchemaViolation(
                            f"{iri_.value} {prop.value}: literal where an entity was declared"
                        )
                    if scope.follows(prop):
                        target_class = self._target_class(q.object, spec, view, closure)
                        values.append(
                            self._fetch(q.object, target_class, scope.narrowed(), view, live)
                        )
                    else:
                        values.append(ObjectRef(q.object))
            if spec.max_cardinality is not None and len(values) > spec.max_cardinality:
                raise SchemaViolation(
                    f"{iri_.value} {prop.value}: {len(values)} values exceed maxCardinality "
                    f"{spec.max_cardinality}"
                )
            obj.values[prop] = values
        obj.dirty.clear()
        return obj

    def _target_class(self, target: Term, spec: PropertySpec, view, closure) -> Term:
        if spec.range_class is not None:
            return spec.range_class
        asserted = sorted(
            (q.object for q in view.match(target, iri(RDF_TYPE), None, None)),
            key=lambda t: t.n3(),
        )
        if not asserted:
            raise UnknownInstance(f"no rdf:type assertion for {target.value}")
        return asserted[0]

    def create(self, class_iri: Term, iri_: Term) -> GraphObject:
        schema = self.derive_schema(class_iri)
        if self.store.match(iri_, iri(RDF_TYPE), None, None):
            raise OgmError(f"{iri_.value} is already typed; create requires an unused IRI")
        return GraphObject(iri_, schema, new=True)

    def expand(
        self,
        ref: ObjectRef,
        class_iri: Term,
        scope: Optional[ScopeSpec] = None,
        view: Optional[StoreSnapshot] = None,
    ) -> GraphObject:
        obj = self.fetch(ref.iri, class_iri, scope, view)
        ref.resolved = obj
        return obj

    # commit

    def commit(self, objects: Union[GraphObject, Iterable[GraphObject]]) -> int:
        """Translate dirty properties into one gated transaction.

        minCardinality is enforced here rather than on assignment so objects
        can be built up incrementally; for fetched objects only the dirty
        properties are re-checked, since a scoped fetch may legitimately not
        have materialized everything.
        """
        if isinstance(objects, GraphObject):
            objects = [objects]
        objects = list(objects)
        inserts: Set[Quad] = set()
        deletes: Set[Quad] = set()
        needs_provenance = []
        for obj in objects:
            self._check_min_cardinality(obj)
            if obj.new:
                inserts.add(Quad(obj.iri, iri(RDF_TYPE), obj.class_iri, self.data_graph))
            for prop in sorted(obj.dirty, key=lambda t: t.value):
                old = {q.object for q in self.store.match(obj.iri, prop, None, self.data_graph)}
                new = set(obj.term_values(prop))
                for gone in old - new:
                    deletes.add(Quad(obj.iri, prop, gone, self.data_graph))
                for added in new - old:
                    inserts.add(Quad(obj.iri, prop, added, self.data_graph))
            if (obj.new or obj.dirty) and self._requires_provenance(obj):
                needs_provenance.append(obj)
        if not inserts and not deletes:
            return self.store.head  # nothing changed: no transaction
        timestamp = self.clock()
        for obj in needs_provenance:
            activity = self._next_activity()
            inserts.add(Quad(activity, iri(RDF_TYPE), iri(PROV + "Activity"), self.data_graph))
            inserts.add(Quad(activity, iri(PROV + "wasAssociatedWith"), self.actor, self.data_graph))
            inserts.add(
                Quad(activity, iri(PROV + "endedAtTime"), literal(timestamp), self.data_graph)
            )
            inserts.add(Quad(obj.iri, iri(PROV + "wasGeneratedBy"), activity, self.data_graph))
        delta = TransactionDelta.create(
            inserts=inserts, deletes=deletes, actor=self.actor, timestamp=timestamp
        )
        try:
            txn = self.store.apply_transaction(delta)
        except TransactionRejected as exc:
            raise CommitRejected(exc.report) from exc
        for obj in objects:
            obj.dirty.clear()
            obj.new = False
        return txn

    def _check_min_cardinality(self, obj: GraphObject):
        props = obj.schema.properties if obj.new else {
            p: obj.schema.properties[p] for p in obj.dirty
        }
        for prop, spec in props.items():
            if spec.min_cardinality is None:
                continue
            if len(obj.values.get(prop, [])) < spec.min_cardinality:
                raise BoundaryViolation(
                    f"{prop.value} on {obj.iri.value} requires at least "
                    f"{spec.min_cardinality} values"
                )

    def _requires_provenance(self, obj: GraphObject) -> bool:
        return bool((obj.schema.super_classes | {obj.class_iri}) & PROVENANCE_CLASSES)

    def _next_activity(self) -> Term:
        self._activity_seq += 1
        local = self.actor.value.rsplit("#", 1)[-1].rsplit("/", 1)[-1].rsplit(":", 1)[-1]
        return iri(f"urn:kapps:activity:{local}:{self._activity_seq}")


def derive_schema(class_iri: Term, view: StoreSnapshot) -> ClassSchema:
    """Build the per-class schema from the ontology as currently loaded."""
    typed_as_class = any(
        q.object == OWL_CLASS for q in view.match(class_iri, iri(RDF_TYPE), None, None)
    )
    has_hierarchy = bool(list(view.match(class_iri, iri(RDFS_SUBCLASSOF), None, None)))
    if not typed_as_class and not has_hierarchy:
        raise UnknownClass(f"{class_iri.value} is not declared as a class in the ontology")

    ancestors: Set[Term] = set()
    stack = [class_iri]
    while stack:
        current = stack.pop()
        for q in view.match(current, iri(RDFS_SUBCLASSOF), None, None):
            parent = q.object
            if parent.is_iri and parent not in ancestors:
                ancestors.add(parent)
                stack.append(parent)
    lineage = {class_iri} | ancestors

    properties: Dict[Term, PropertySpec] = {}
    for q in view.match(None, iri(RDFS_DOMAIN), None, None):
        if q.object not in lineage:
            continue
        prop = q.subject
        ranges = [r.object for r in view.match(prop, iri(RDFS_RANGE), None, None)]
        types = {t.object for t in view.match(prop, iri(RDF_TYPE), None, None)}
        datatype = next((r.value for r in ranges if r.is_iri and r.value.startswith(XSD)), None)
        if OWL_DATATYPE_PROPERTY in types or datatype is not None:
            kind = "data"
            range_class = None
        else:
            kind = "object"
            range_class = next((r for r in ranges if r.is_iri), None)
        properties[prop] = PropertySpec(
            iri=prop,
            kind=kind,
            range_class=range_class,
            datatype=datatype if kind == "data" else None,
        )

    # OWL restrictions on the class or an ancestor override cardinalities.
    for cls in lineage:
        for q in view.match(cls, iri(RDFS_SUBCLASSOF), None, None):
            node = q.object
            if not node.is_blank:
                continue
            if not any(
                r.object == OWL_RESTRICTION for r in view.match(node, iri(RDF_TYPE), None, None)
            ):
                continue
            on_prop = [r.object for r in view.match(node, iri(OWL + "onProperty"), None, None)]
            if not on_prop or on_prop[0] not in properties:
                continue
            spec = properties[on_prop[0]]
            max_c, min_c = spec.max_cardinality, spec.min_cardinality
            for pred, setter in ((OWL + "maxCardinality", "max"), (OWL + "minCardinality", "min"),
                                 (OWL + "cardinality", "both")):
                for r in view.match(node, iri(pred), None, None):
                    n = int(r.object.value)
                    if setter in ("max", "both"):
                        max_c = n
                    if setter in ("min", "both"):
                        min_c = n
            properties[on_prop[0]] = PropertySpec(
                iri=spec.iri,
                kind=spec.kind,
                range_class=spec.range_class,
                datatype=spec.datatype,
                max_cardinality=max_c,
                min_cardinality=min_c,
            )

    return ClassSchema(class_iri=class_iri, super_classes=ancestors, properties=properties)
