"""Assembly of one runtime: store, bootstrap ontologies/shapes, gate, mappers.

Bootstrap loads are ungated (the shapes are not yet installed while they are
being loaded); everything after `install_shapes` passes through the SHACL
admission gate. Audit mode re-validates the full graph after every admitted
commit and fails hard on non-conformance, which is the executable form of the
gate-soundness invariant.
"""

from __future__ import annotations

from importlib import resources
from typing import Iterable, Optional, Sequence

from . import shacl
from .ogm import Ogm
from .store import HistoryEntry, QuadStore
from .terms import DEFAULT_GRAPH, ONTOLOGY_GRAPH, SHAPES_GRAPH, Term
from .vocab import PREFIXES


class AuditFailure(AssertionError):
    """A commit was admitted whose post-state does not conform."""


def fixture_text(name: str) -> str:
    return (resources.files("kapps") / "fixtures" / name).read_text(encoding="utf-8")


FLEXCONVEYOR_ONTOLOGIES = ("core.ttl", "service.ttl", "flexconveyor.ttl")
FLEXCONVEYOR_SHAPES = ("flexconveyor-shapes.ttl",)
UNSCREW_ONTOLOGIES = ("core.ttl", "service.ttl", "unscrew.ttl")
UNSCREW_SHAPES = ("unscrew-shapes.ttl",)


class Runtime:
    def __init__(self, audit: bool = False):
        self.store = QuadStore()
        self.shapes = shacl.ShapeSet()
        self.audit = audit
        if audit:
            self.store.add_commit_listener(self._audit_commit)

    # bootstrap

    def load_ontology(self, text: str) -> int:
        return self.store.load_graph(text, ONTOLOGY_GRAPH)

    def load_data(self, text: str) -> int:
        return self.store.load_graph(text, DEFAULT_GRAPH)

    def load_shapes(self, text: str) -> int:
        txn = self.store.load_graph(text, SHAPES_GRAPH)
        self.install_shapes()
        return txn

    def install_shapes(self):
        self.shapes = shacl.load_shapes(self.store.snapshot(), SHAPES_GRAPH)
        self.store.install_gate(shacl.make_gate(self.shapes))

    def _audit_commit(self, entry: HistoryEntry):
        report = shacl.validate(self.store.snapshot(), self.shapes)
        if not report.conforms:
            raise AuditFailure(
                f"post-state of txn {entry.txn_id} does not conform:\n"
                + shacl.serialize_report(report, PREFIXES)
            )

    # access

    def ogm(self, actor: Term, clock=None) -> Ogm:
        return Ogm(self.store, actor=actor, clock=clock)

    def validate_now(self) -> shacl.ValidationReport:
        return shacl.validate(self.store.snapshot(), self.shapes)

    @classmethod
    def bootstrapped(
        cls,
        ontologies: Sequence[str],
        shape_files: Sequence[str] = (),
        audit: bool = False,
    ) -> "Runtime":
        runtime = cls(audit=audit)
        for name in ontologies:
            runtime.load_ontology(fixture_text(name))
        for name in shape_files:
            runtime.store.load_graph(fixture_text(name), SHAPES_GRAPH)
        runtime.install_shapes()
        return runtime

    @classmethod
    def flexconveyor(cls, audit: bool = False) -> "Runtime":
        return cls.bootstrapped(FLEXCONVEYOR_ONTOLOGIES, FLEXCONVEYOR_SHAPES, audit=audit)

    @classmethod
    def unscrew(cls, audit: bool = False) -> "Runtime":
        return cls.bootstrapped(UNSCREW_ONTOLOGIES, UNSCREW_SHAPES, audit=audit)
