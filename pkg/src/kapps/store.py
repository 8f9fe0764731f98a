"""In-memory transactional quad store.

The store is the authoritative system state. Every mutation enters through
`apply_transaction` (gated by the installed admission hook) or `load_graph`
(the ungated bootstrap path for ontologies and shapes). Readers work on
immutable snapshots; write admission is fully serialized behind a lock.

Indexing: SPO, POS, and OSP permutations are kept per named graph, so every
single-wildcard pattern is answered without a full scan.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Set, Tuple

from . import turtle
from .terms import DEFAULT_GRAPH, Quad, Term, TermError, blank, iri

BOOTSTRAP_ACTOR = iri("urn:kapps:bootstrap")


class MalformedDelta(ValueError):
    """Delta breaks a structural invariant (overlapping insert/delete sets)."""


class TransactionRejected(Exception):
    """Raised when the admission gate vetoes a delta. Carries the report."""

    def __init__(self, report):
        super().__init__("transaction rejected by admission gate")
        self.report = report


@dataclass(frozen=True)
class TransactionDelta:
    inserts: frozenset
    deletes: frozenset
    actor: Term
    timestamp: datetime

    @staticmethod
    def create(
        inserts: Iterable[Quad] = (),
        deletes: Iterable[Quad] = (),
        actor: Term = BOOTSTRAP_ACTOR,
        timestamp: Optional[datetime] = None,
    ) -> "TransactionDelta":
        ins = frozenset(inserts)
        dels = frozenset(deletes)
        if ins & dels:
            raise MalformedDelta("insert and delete sets overlap")
        return TransactionDelta(ins, dels, actor, timestamp or datetime.now(timezone.utc))

    @property
    def empty(self) -> bool:
        return not self.inserts and not self.deletes


@dataclass(frozen=True)
class HistoryEntry:
    """Effective change of one admitted transaction (triple granularity)."""

    txn_id: int
    timestamp: datetime
    actor: Term
    inserts: frozenset
    deletes: frozenset


class HistoryError(ValueError):
    pass


_Index = Dict[Term, Dict[Term, Dict[Term, Set[Term]]]]


def _index_add(index: _Index, g: Term, a: Term, b: Term, c: Term):
    index.setdefault(g, {}).setdefault(a, {}).setdefault(b, set()).add(c)


def _index_remove(index: _Index, g: Term, a: Term, b: Term, c: Term):
    graph = index[g]
    level = graph[a][b]
    level.discard(c)
    if not level:
        del graph[a][b]
        if not graph[a]:
            del graph[a]
            if not graph:
                del index[g]


class _IndexedQuads:
    """Shared quad set + SPO/POS/OSP index triple, per named graph."""

    def __init__(self):
        self.quads: Set[Quad] = set()
        self.spo: _Index = {}
        self.pos: _Index = {}
        self.osp: _Index = {}

    def add(self, q: Quad) -> bool:
        if q in self.quads:
            return False
        self.quads.add(q)
        _index_add(self.spo, q.graph, q.subject, q.predicate, q.object)
        _index_add(self.pos, q.graph, q.predicate, q.object, q.subject)
        _index_add(self.osp, q.graph, q.object, q.subject, q.predicate)
        return True

    def remove(self, q: Quad) -> bool:
        if q not in self.quads:
            return False
        self.quads.discard(q)
        _index_remove(self.spo, q.graph, q.subject, q.predicate, q.object)
        _index_remove(self.pos, q.graph, q.predicate, q.object, q.subject)
        _index_remove(self.osp, q.graph, q.object, q.subject, q.predicate)
        return True

    def match(
        self,
        s: Optional[Term] = None,
        p: Optional[Term] = None,
        o: Optional[Term] = None,
        g: Optional[Term] = None,
    ) -> Iterator[Quad]:
        graphs = [g] if g is not None else list(self.spo.keys())
        for graph in graphs:
            spo = self.spo.get(graph)
            if spo is None:
                continue
            if s is not None:
                by_p = spo.get(s)
                if by_p is None:
                    continue
                preds = [p] if p is not None else list(by_p.keys())
                for pred in preds:
                    objs = by_p.get(pred)
                    if objs is None:
                        continue
                    if o is not None:
                        if o in objs:
                            yield Quad(s, pred, o, graph)
                    else:
                        for obj in objs:
                            yield Quad(s, pred, obj, graph)
            elif p is not None:
                by_o = self.pos.get(graph, {}).get(p)
                if by_o is None:
                    continue
                if o is not None:
                    for subj in by_o.get(o, ()):
                        yield Quad(subj, p, o, graph)
                else:
                    for obj, subjects in by_o.items():
                        for subj in subjects:
                            yield Quad(subj, p, obj, graph)
            elif o is not None:
                by_s = self.osp.get(graph, {}).get(o)
                if by_s is None:
                    continue
                for subj, preds in by_s.items():
                    for pred in preds:
                        yield Quad(subj, pred, o, graph)
            else:
                for subj, by_p in spo.items():
                    for pred, objs in by_p.items():
                        for obj in objs:
                            yield Quad(subj, pred, obj, graph)


class StoreSnapshot:
    """Immutable view of the store at one transaction boundary."""

    def __init__(self, indexed: _IndexedQuads, txn_id: int):
        self._indexed = indexed
        self.txn_id = txn_id

    def match(self, s=None, p=None, o=None, g=None) -> Iterator[Quad]:
        return self._indexed.match(s, p, o, g)

    def quads(self) -> frozenset:
        return frozenset(self._indexed.quads)

    def __len__(self):
        return len(self._indexed.quads)

    def __contains__(self, q: Quad):
        return q in self._indexed.quads

    def graphs(self) -> List[Term]:
        return sorted({q.graph for q in self._indexed.quads}, key=lambda t: t.value)


GateHook = Callable[[StoreSnapshot, TransactionDelta], Optional[object]]


def overlay(base: StoreSnapshot, delta: TransactionDelta) -> StoreSnapshot:
    """Virtual post-state of applying `delta` to `base` (no store mutation)."""
    merged = _IndexedQuads()
    for q in base.match():
        merged.add(q)
    for q in delta.deletes:
        merged.remove(q)
    for q in delta.inserts:
        merged.add(q)
    return StoreSnapshot(merged, base.txn_id)


class QuadStore:
    """Write-authoritative quad store with serialized, gated admission."""

    def __init__(self):
        self._data = _IndexedQuads()
        self._lock = threading.RLock()
        self._txn_counter = 0
        self._gate: Optional[GateHook] = None
        self._history: List[HistoryEntry] = []
        self._graph_versions: Dict[Term, int] = {}
        self._blank_counter = itertools.count(1)
        self._listeners: List[Callable[[HistoryEntry], None]] = []
        self._snapshot_cache: Optional[StoreSnapshot] = None

    def add_commit_listener(self, listener: Callable[[HistoryEntry], None]):
        """Observer called after every admitted commit (inside the write lock,
        so it sees exactly the post-state of the entry it is handed)."""
        with self._lock:
            self._listeners.append(listener)

    # write path

    def install_gate(self, gate: Optional[GateHook]):
        """Install the admission hook consulted on every apply_transaction."""
        with self._lock:
            self._gate = gate

    def apply_transaction(self, delta: TransactionDelta) -> int:
        """Atomically admit `delta`; returns the transaction id.

        The effective change (inserts not already present, deletes actually
        present) is what gets applied and recorded; a delta with no effect is
        accepted without consuming a transaction id. Rejection leaves the
        store bit-identical and raises TransactionRejected with the report.
        """
        if delta.inserts & delta.deletes:
            raise MalformedDelta("insert and delete sets overlap")
        with self._lock:
            delta = self._skolemize(delta)
            effective_inserts = frozenset(q for q in delta.inserts if q not in self._data.quads)
            effective_deletes = frozenset(q for q in delta.deletes if q in self._data.quads)
            if not effective_inserts and not effective_deletes:
                return self._txn_counter
            if self._gate is not None:
                report = self._gate(self._snapshot_locked(), delta)
                if report is not None:
                    raise TransactionRejected(report)
            return self._apply_locked(effective_inserts, effective_deletes, delta)

    def load_graph(self, document: str, graph: Term = DEFAULT_GRAPH, base: Optional[str] = None) -> int:
        """Parse Turtle text and apply it as one ungated transaction."""
        doc = turtle.parse(document, base)
        quads = []
        relabel: Dict[str, Term] = {}
        for s, p, o in doc.statements:
            s = self._relabel(s, relabel)
            o = self._relabel(o, relabel)
            quads.append(Quad(s, p, o, graph))
        with self._lock:
            effective = frozenset(q for q in quads if q not in self._data.quads)
            if not effective:
                return self._txn_counter
            delta = TransactionDelta.create(inserts=effective, actor=BOOTSTRAP_ACTOR)
            return self._apply_locked(effective, frozenset(), delta)

    def _apply_locked(self, inserts, deletes, delta: TransactionDelta) -> int:
        for q in deletes:
            self._data.remove(q)
        for q in inserts:
            self._data.add(q)
        self._txn_counter += 1
        txn = self._txn_counter
        for g in {q.graph for q in inserts} | {q.graph for q in deletes}:
            self._graph_versions[g] = txn
        entry = HistoryEntry(txn, delta.timestamp, delta.actor, inserts, deletes)
        self._history.append(entry)
        self._snapshot_cache = None
        for listener in self._listeners:
            listener(entry)
        return txn

    def _relabel(self, term: Term, relabel: Dict[str, Term]) -> Term:
        if not term.is_blank:
            return term
        if term.value not in relabel:
            relabel[term.value] = blank(f"sk{next(self._blank_counter)}")
        return relabel[term.value]

    def _skolemize(self, delta: TransactionDelta) -> TransactionDelta:
        """Rename delta-scoped blank labels to fresh internal labels.

        Labels already present in the store (obtained from a read) keep their
        identity so deletes can address stored statements; everything else is
        minted fresh to prevent cross-delta capture.
        """
        labels = {q.subject.value for q in self._data.quads if q.subject.is_blank}
        labels |= {q.object.value for q in self._data.quads if q.object.is_blank}
        relabel: Dict[str, Term] = {}

        def walk(term: Term) -> Term:
            if not term.is_blank or term.value in labels:
                return term
            return self._relabel(term, relabel)

        def walk_quad(q: Quad) -> Quad:
            return Quad(walk(q.subject), q.predicate, walk(q.object), q.graph)

        if not any(
            q.subject.is_blank or q.object.is_blank for q in itertools.chain(delta.inserts, delta.deletes)
        ):
            return delta
        return TransactionDelta(
            frozenset(walk_quad(q) for q in delta.inserts),
            frozenset(walk_quad(q) for q in delta.deletes),
            delta.actor,
            delta.timestamp,
        )

    # read path

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return self._snapshot_locked()

    def _snapshot_locked(self) -> StoreSnapshot:
        # Snapshots are reused between commits; reads dominate writes, and the
        # live index is never handed out, so one frozen copy per head is safe.
        if self._snapshot_cache is None:
            copy = _IndexedQuads()
            for q in self._data.quads:
                copy.add(q)
            self._snapshot_cache = StoreSnapshot(copy, self._txn_counter)
        return self._snapshot_cache

    def match(self, s=None, p=None, o=None, g=None) -> List[Quad]:
        with self._lock:
            return list(self._data.match(s, p, o, g))

    def __len__(self):
        with self._lock:
            return len(self._data.quads)

    @property
    def head(self) -> int:
        with self._lock:
            return self._txn_counter

    def graph_version(self, graph: Term) -> int:
        """Transaction id of the last commit that touched `graph` (0 if none)."""
        with self._lock:
            return self._graph_versions.get(graph, 0)

    # history (triple-granularity change log)

    def history(self) -> List[HistoryEntry]:
        with self._lock:
            return list(self._history)

    def state_at(self, when) -> StoreSnapshot:
        """Snapshot at a past transaction id or timestamp.

        Reconstructed by reverse-applying entries from the head, since recent
        states are the common case. Timestamps resolve to the last entry with
        timestamp <= the instant, ties broken by transaction id.
        """
        with self._lock:
            if isinstance(when, datetime):
                txn = 0
                for entry in self._history:
                    if entry.timestamp <= when:
                        txn = max(txn, entry.txn_id)
            else:
                txn = int(when)
            if txn < 0 or txn > self._txn_counter:
                raise HistoryError(f"transaction {txn} out of range (head={self._txn_counter})")
            rebuilt = _IndexedQuads()
            for q in self._data.quads:
                rebuilt.add(q)
            for entry in reversed(self._history):
                if entry.txn_id <= txn:
                    break
                for q in entry.inserts:
                    rebuilt.remove(q)
                for q in entry.deletes:
                    rebuilt.add(q)
            return StoreSnapshot(rebuilt, txn)

    def diff_range(self, from_txn: int, to_txn: int) -> Tuple[frozenset, frozenset]:
        """Net (inserts, deletes) between two transaction boundaries.

        Insert-then-delete of the same quad cancels to nothing, so the result
        equals the set difference of the two reconstructed states.
        """
        with self._lock:
            if from_txn > to_txn:
                raise HistoryError("from_txn must be <= to_txn")
            if from_txn < 0 or to_txn > self._txn_counter:
                raise HistoryError(f"range [{from_txn}, {to_txn}] out of bounds")
            net_in: Set[Quad] = set()
            net_del: Set[Quad] = set()
            for entry in self._history:
                if entry.txn_id <= from_txn or entry.txn_id > to_txn:
                    continue
                for q in entry.deletes:
                    if q in net_in:
                        net_in.discard(q)
                    else:
                        net_del.add(q)
                for q in entry.inserts:
                    if q in net_del:
                        net_del.discard(q)
                    else:
                        net_in.add(q)
            return frozenset(net_in), frozenset(net_del)

    # convenience output

    def dump_graph(self, graph: Term, prefixes: Dict[str, str]) -> str:
        triples = {(q.subject, q.predicate, q.object) for q in self.match(g=graph)}
        return turtle.serialize(triples, prefixes)
