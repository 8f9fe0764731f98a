import random
import threading

import pytest

from oracles import linear_scan
from conftest import random_graph

from kapps.shacl import ValidationReport
from kapps.store import (
    MalformedDelta,
    QuadStore,
    TransactionDelta,
    TransactionRejected,
)
from kapps.terms import DEFAULT_GRAPH, SHAPES_GRAPH, Quad, blank, iri, literal


def q(s, p, o, g=DEFAULT_GRAPH):
    return Quad(iri(f"urn:t:{s}"), iri(f"urn:t:{p}"), iri(f"urn:t:{o}"), g)


def test_empty_delta_is_identity():
    store = QuadStore()
    head = store.apply_transaction(TransactionDelta.create())
    assert head == 0
    assert len(store) == 0
    assert store.history() == []


def test_apply_and_match():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("s", "p", "o")]))
    assert store.match(iri("urn:t:s"), None, None) == [q("s", "p", "o")]
    assert store.match(None, None, None, SHAPES_GRAPH) == []


def test_overlapping_insert_delete_rejected():
    with pytest.raises(MalformedDelta):
        TransactionDelta.create(inserts=[q("a", "b", "c")], deletes=[q("a", "b", "c")])


def test_random_delta_on_empty_store_equals_inserts(rng):
    quads = random_graph(rng, 50)
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=quads))
    assert store.snapshot().quads() == frozenset(quads)


def test_gate_rejection_leaves_store_bit_identical():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("keep", "p", "o")]))
    before = store.snapshot().quads()
    report = ValidationReport(conforms=False, results=[])

    store.install_gate(lambda base, delta: report)
    with pytest.raises(TransactionRejected) as err:
        store.apply_transaction(TransactionDelta.create(inserts=[q("new", "p", "o")]))
    assert err.value.report is report
    assert store.snapshot().quads() == before
    assert store.head == 1
    assert len(store.history()) == 1


def test_gate_not_consulted_for_noop_delta():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("a", "p", "o")]))
    store.install_gate(lambda base, delta: ValidationReport(conforms=False, results=[]))
    # inserting an existing quad has no effect, so it is accepted as a no-op
    head = store.apply_transaction(TransactionDelta.create(inserts=[q("a", "p", "o")]))
    assert head == 1


def test_snapshot_isolation():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("a", "p", "o")]))
    snap = store.snapshot()
    store.apply_transaction(TransactionDelta.create(inserts=[q("b", "p", "o")]))
    assert {x.subject.value for x in snap.match()} == {"urn:t:a"}
    assert len(store.snapshot()) == 2
    assert snap.quads() == store.state_at(1).quads()


def test_two_snapshots_without_commit_are_equal():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("a", "p", "o")]))
    assert store.snapshot().quads() == store.snapshot().quads()


def test_match_against_linear_scan_oracle(rng):
    quads = random_graph(rng, 80)
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=quads))
    subjects = {x.subject for x in quads} | {iri("urn:t:absent")}
    predicates = {x.predicate for x in quads}
    objects = {x.object for x in quads}
    patterns = [(None, None, None, None)]
    for s in list(subjects)[:4]:
        patterns += [(s, None, None, None)]
        for p in list(predicates)[:3]:
            patterns += [(s, p, None, None), (None, p, None, None)]
            for o in list(objects)[:3]:
                patterns += [(s, p, o, None), (None, p, o, None), (None, None, o, None)]
    for s, p, o, g in patterns:
        assert sorted(store.match(s, p, o, g), key=repr) == sorted(
            linear_scan(quads, s, p, o, g), key=repr
        ), f"pattern {(s, p, o, g)}"


def test_load_graph_roundtrip(rng):
    quads = random_graph(rng, 40)
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=quads))
    from kapps.vocab import PREFIXES

    text = store.dump_graph(DEFAULT_GRAPH, PREFIXES)
    second = QuadStore()
    second.load_graph(text, DEFAULT_GRAPH)
    assert second.snapshot().quads() == frozenset(quads)


def test_load_graph_empty_document():
    store = QuadStore()
    assert store.load_graph("") == 0
    assert len(store) == 0


def test_blank_labels_are_skolemized_per_document():
    store = QuadStore()
    doc = "@prefix ex: <http://e.org/> .\n_:n ex:p ex:o ."
    store.load_graph(doc)
    store.load_graph(doc)
    subjects = {x.subject.value for x in store.match(None, iri("http://e.org/p"), None)}
    assert len(subjects) == 2  # same label in two documents stays two nodes


def test_stored_blank_can_be_deleted_by_internal_label():
    store = QuadStore()
    store.load_graph("@prefix ex: <http://e.org/> .\n_:n ex:p ex:o .")
    stored = store.match(None, None, None)[0]
    store.apply_transaction(TransactionDelta.create(deletes=[stored]))
    assert len(store) == 0


def test_graph_version_tracks_touched_graph():
    store = QuadStore()
    store.apply_transaction(TransactionDelta.create(inserts=[q("a", "p", "o")]))
    assert store.graph_version(DEFAULT_GRAPH) == 1
    assert store.graph_version(SHAPES_GRAPH) == 0


def test_concurrent_commits_serialize():
    store = QuadStore()
    errors = []

    def writer(i):
        try:
            for j in range(25):
                store.apply_transaction(
                    TransactionDelta.create(inserts=[q(f"w{i}", "p", f"o{j}")])
                )
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert store.head == 100
    txns = [e.txn_id for e in store.history()]
    assert txns == sorted(txns) == list(range(1, 101))
    # final state equals sequential application of the recorded order
    replay = set()
    for entry in store.history():
        replay -= set(entry.deletes)
        replay |= set(entry.inserts)
    assert replay == set(store.snapshot().quads())
