import random

import pytest

from conftest import random_shacl_case
from oracles import naive_validate, report_tuples

from kapps import shacl, turtle
from kapps.runtime import Runtime, fixture_text
from kapps.shacl import UnsupportedComponent
from kapps.store import QuadStore, TransactionDelta, TransactionRejected
from kapps.terms import (
    DEFAULT_GRAPH,
    ONTOLOGY_GRAPH,
    SH,
    SHAPES_GRAPH,
    Quad,
    iri,
    literal,
)
from kapps.vocab import PREFIXES, fc, fci

LISTING_MESSAGE = "A FlexConveyorModule may possess at most one Box at a time."
INTRANSIT_MESSAGE = "A Box in InTransit state must be possessed by exactly one resource."


def _fc_runtime():
    return Runtime.flexconveyor()


def _seed_module_with_box(store, module="Module3", boxes=("Box1",)):
    quads = [Quad(fci(module), iri("http://www.w3.org/1999/02/22-rdf-syntax-ns#type"),
                  fc("FlexConveyorModule"), DEFAULT_GRAPH)]
    for box in boxes:
        quads += [
            Quad(fci(box), iri("http://www.w3.org/1999/02/22-rdf-syntax-ns#type"),
                 fc("Box"), DEFAULT_GRAPH),
            Quad(fci(module), fc("hasPossession"), fci(box), DEFAULT_GRAPH),
        ]
    store.apply_transaction(TransactionDelta.create(inserts=quads))


def test_load_shapes_extracts_listing_constraints():
    rt = _fc_runtime()
    by_id = {s.id.value.rsplit("#", 1)[-1]: s for s in rt.shapes}
    intransit = by_id["InTransitBoxPossessedShape"]
    assert [t.value.rsplit("#", 1)[-1] for t in intransit.target_classes] == ["Box"]
    assert len(intransit.sparql_constraints) == 1
    assert intransit.sparql_constraints[0].message == INTRANSIT_MESSAGE
    assert intransit.sparql_constraints[0].prefixes["fc"].endswith("FlexConveyor#")
    module_shape = by_id["FlexConveyorModuleShape"]
    assert module_shape.properties[0].max_count == 1
    assert module_shape.properties[0].message == LISTING_MESSAGE


def test_empty_shapes_graph_is_empty_shapeset():
    store = QuadStore()
    assert len(shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)) == 0


def test_unsupported_component_is_hard_error():
    store = QuadStore()
    store.load_graph(
        """
        @prefix sh: <http://www.w3.org/ns/shacl#> .
        @prefix ex: <http://e.org/> .
        ex:S a sh:NodeShape ; sh:targetClass ex:C ;
            sh:property [ sh:path ex:p ; sh:uniqueLang true ] .
        """,
        SHAPES_GRAPH,
    )
    with pytest.raises(UnsupportedComponent) as err:
        shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
    assert "uniqueLang" in str(err.value)
    assert "ex:S" in str(err.value) or "e.org/S" in str(err.value)


def test_validate_empty_data_graph_conforms():
    rt = _fc_runtime()
    report = shacl.validate(rt.store.snapshot(), rt.shapes)
    assert report.conforms
    assert report.results == []


def test_max_count_violation_matches_listing_report():
    rt = _fc_runtime()
    rt.store.install_gate(None)
    _seed_module_with_box(rt.store, boxes=("Box1", "Box2"))
    report = shacl.validate(rt.store.snapshot(), rt.shapes)
    assert not report.conforms
    (result,) = report.results
    assert result.focus_node == fci("Module3")
    assert result.result_path == fc("hasPossession")
    assert result.component == SH + "MaxCountConstraintComponent"
    assert result.message == LISTING_MESSAGE
    text = shacl.serialize_report(report, PREFIXES)
    for needle in (
        'sh:conforms "false"^^xsd:boolean',
        "sh:sourceConstraintComponent sh:MaxCountConstraintComponent",
        "sh:resultPath fc:hasPossession",
        LISTING_MESSAGE,
        'sh:maxCount "1"^^xsd:integer',
        "rdf:type sh:PropertyShape",
    ):
        assert needle in text, needle


def test_report_serialization_deterministic_and_vendor_flag():
    rt = _fc_runtime()
    rt.store.install_gate(None)
    _seed_module_with_box(rt.store, boxes=("Box1", "Box2"))
    report = shacl.validate(rt.store.snapshot(), rt.shapes)
    assert shacl.serialize_report(report, PREFIXES) == shacl.serialize_report(report, PREFIXES)
    assert "rdf4j" not in shacl.serialize_report(report, PREFIXES)
    vendor = shacl.serialize_report(report, PREFIXES, vendor_compat=True)
    assert 'rdf4j:truncated "false"^^xsd:boolean' in vendor
    assert "rdf4j-sh:shapesGraph rdf4j:SHACLShapeGraph" in vendor


def test_conforming_report_serialization():
    report = shacl.ValidationReport(conforms=True, results=[])
    text = shacl.serialize_report(report)
    assert 'sh:conforms "true"^^xsd:boolean' in text
    assert "sh:result " not in text


def test_report_roundtrip_through_parser():
    rt = _fc_runtime()
    rt.store.install_gate(None)
    _seed_module_with_box(rt.store, boxes=("Box1", "Box2"))
    report = shacl.validate(rt.store.snapshot(), rt.shapes)
    text = shacl.serialize_report(report, PREFIXES)
    parsed = shacl.parse_report(text)
    assert parsed.conforms is False
    assert parsed.results[0].component == SH + "MaxCountConstraintComponent"
    assert parsed.results[0].focus_node == fci("Module3")


def test_admission_gate_legal_handover_passes():
    rt = _fc_runtime()
    a, b, box = fci("ModuleA"), fci("ModuleB"), fci("BoxH")
    state = fci("BoxH_state")
    rdf_type = iri("http://www.w3.org/1999/02/22-rdf-syntax-ns#type")
    rt.store.apply_transaction(
        TransactionDelta.create(
            inserts=[
                Quad(a, rdf_type, fc("FlexConveyorModule"), DEFAULT_GRAPH),
                Quad(b, rdf_type, fc("FlexConveyorModule"), DEFAULT_GRAPH),
                Quad(box, rdf_type, fc("Box"), DEFAULT_GRAPH),
                Quad(state, rdf_type, fc("InTransit"), DEFAULT_GRAPH),
                Quad(box, fc("hasState"), state, DEFAULT_GRAPH),
                Quad(a, fc("hasPossession"), box, DEFAULT_GRAPH),
                Quad(box, fc("isPossessedBy"), a, DEFAULT_GRAPH),
            ]
        )
    )
    handover = TransactionDelta.create(
        inserts=[
            Quad(b, fc("hasPossession"), box, DEFAULT_GRAPH),
            Quad(box, fc("isPossessedBy"), b, DEFAULT_GRAPH),
        ],
        deletes=[
            Quad(a, fc("hasPossession"), box, DEFAULT_GRAPH),
            Quad(box, fc("isPossessedBy"), a, DEFAULT_GRAPH),
        ],
    )
    txn = rt.store.apply_transaction(handover)
    assert txn > 0
    assert shacl.validate(rt.store.snapshot(), rt.shapes).conforms


def test_gate_soundness_rejection_keeps_store_conformant():
    rt = _fc_runtime()
    _seed_module_with_box(rt.store, boxes=("Box1",))
    assert shacl.validate(rt.store.snapshot(), rt.shapes).conforms
    with pytest.raises(TransactionRejected):
        rt.store.apply_transaction(
            TransactionDelta.create(
                inserts=[Quad(fci("Module3"), fc("hasPossession"), fci("Box1b"), DEFAULT_GRAPH),
                         Quad(fci("Box1b"), iri("http://www.w3.org/1999/02/22-rdf-syntax-ns#type"), fc("Box"), DEFAULT_GRAPH)]
            )
        )
    assert shacl.validate(rt.store.snapshot(), rt.shapes).conforms


def test_warning_severity_does_not_block():
    store = QuadStore()
    store.load_graph(
        """
        @prefix sh: <http://www.w3.org/ns/shacl#> .
        @prefix ex: <http://e.org/> .
        @prefix xsd: <http://www.w3.org/2001/XMLSchema#> .
        ex:S a sh:NodeShape ; sh:targetClass ex:C ; sh:severity sh:Warning ;
            sh:property [ sh:path ex:p ; sh:maxCount "0"^^xsd:integer ] .
        """,
        SHAPES_GRAPH,
    )
    shapes = shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
    store.install_gate(shacl.make_gate(shapes))
    rdf_type = iri("http://www.w3.org/1999/02/22-rdf-syntax-ns#type")
    txn = store.apply_transaction(
        TransactionDelta.create(
            inserts=[
                Quad(iri("http://e.org/i"), rdf_type, iri("http://e.org/C"), DEFAULT_GRAPH),
                Quad(iri("http://e.org/i"), iri("http://e.org/p"), literal(1), DEFAULT_GRAPH),
            ]
        )
    )
    assert txn > 0  # admitted despite the warning-severity result
    report = shacl.validate(store.snapshot(), shapes)
    assert not report.conforms
    assert all(r.severity.value.endswith("Warning") for r in report.results)


def test_scope_restriction_equals_full_validation(rng):
    for seed in range(30):
        case_rng = random.Random(3000 + seed)
        quads, shapes_text, _ = random_shacl_case(case_rng)
        store = QuadStore()
        store.load_graph(shapes_text, SHAPES_GRAPH)
        if quads:
            store.apply_transaction(TransactionDelta.create(inserts=quads))
        shapes = shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
        full = shacl.validate(store.snapshot(), shapes)
        touched = {q.subject for q in quads} | {
            q.object for q in quads if not q.object.is_literal
        }
        scoped = shacl.validate(store.snapshot(), shapes, focus_scope=touched)
        assert report_tuples(full) == report_tuples(scoped)


def test_component_vocabulary_closed(rng):
    for seed in range(40):
        case_rng = random.Random(4000 + seed)
        quads, shapes_text, _ = random_shacl_case(case_rng)
        store = QuadStore()
        store.load_graph(shapes_text, SHAPES_GRAPH)
        if quads:
            store.apply_transaction(TransactionDelta.create(inserts=quads))
        shapes = shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
        report = shacl.validate(store.snapshot(), shapes)
        assert report.components() <= shacl.COMPONENT_VOCABULARY


def test_oracle_equivalence_sample():
    mismatches = []
    for seed in range(100):
        case_rng = random.Random(5000 + seed)
        quads, shapes_text, naive_shapes = random_shacl_case(case_rng)
        store = QuadStore()
        store.load_graph(shapes_text, SHAPES_GRAPH)
        if quads:
            store.apply_transaction(TransactionDelta.create(inserts=quads))
        shapes = shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
        engine = report_tuples(shacl.validate(store.snapshot(), shapes))
        oracle = naive_validate(quads, naive_shapes)
        if engine != oracle:
            mismatches.append((seed, engine ^ oracle))
    assert not mismatches, mismatches[:3]
