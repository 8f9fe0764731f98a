"""Independent oracles: deliberately index-free, join-free re-implementations
used to check the engines. Each one recomputes results from first principles
(linear scans, exhaustive assignment enumeration, per-focus re-checks) and
never calls the code path it validates."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from kapps import sparql
from kapps.sparql import (
    BoolExpr,
    Comparison,
    CountAggregate,
    Filter,
    Group,
    Query,
    SubSelect,
    TriplePattern,
    Variable,
)
from kapps.terms import RDF_TYPE, Quad, Term, iri, literal


def linear_scan(quads: Sequence[Quad], s=None, p=None, o=None, g=None) -> List[Quad]:
    out = []
    for q in quads:
        if s is not None and q.subject != s:
            continue
        if p is not None and q.predicate != p:
            continue
        if o is not None and q.object != o:
            continue
        if g is not None and q.graph != g:
            continue
        out.append(q)
    return out


# brute-force SPARQL oracle


def _term_universe(triples: Set[Tuple[Term, Term, Term]]) -> List[Term]:
    terms: Set[Term] = set()
    for s, p, o in triples:
        terms.update((s, p, o))
    return sorted(terms, key=lambda t: t.n3())


def _pattern_vars(group: Group) -> List[str]:
    names: List[str] = []
    for member in group.members:
        if isinstance(member, TriplePattern):
            for t in (member.s, member.p, member.o):
                if isinstance(t, Variable) and t.name not in names:
                    names.append(t.name)
    return names


def _check_pattern(pattern: TriplePattern, binding: Dict[str, Term], triples) -> bool:
    def resolve(t):
        return binding[t.name] if isinstance(t, Variable) else t

    return (resolve(pattern.s), resolve(pattern.p), resolve(pattern.o)) in triples


def _eval_expr(expr, binding: Dict[str, Term]) -> bool:
    if isinstance(expr, BoolExpr):
        if expr.op == "and":
            return all(_eval_expr(a, binding) for a in expr.args)
        if expr.op == "or":
            return any(_eval_expr(a, binding) for a in expr.args)
        return not _eval_expr(expr.args[0], binding)
    assert isinstance(expr, Comparison)
    left = binding.get(expr.left.name) if isinstance(expr.left, Variable) else expr.left
    right = binding.get(expr.right.name) if isinstance(expr.right, Variable) else expr.right
    if left is None or right is None:
        return False
    if expr.op == "=":
        return left == right
    if expr.op == "!=":
        return left != right
    lv, rv = left.numeric_value(), right.numeric_value()
    if lv is None or rv is None:
        raise TypeError("oracle: ordering comparison on non-numerics")
    return {"<": lv < rv, "<=": lv <= rv, ">": lv > rv, ">=": lv >= rv}[expr.op]


def _subselect_rows(sub: SubSelect, triples, universe, initial) -> List[Dict[str, Term]]:
    inner = _group_solutions(sub.group, triples, universe, initial)
    aggregates = [p for p in sub.projection if isinstance(p, CountAggregate)]
    plain = [p for p in sub.projection if isinstance(p, Variable)]
    groups: Dict[tuple, List[Dict[str, Term]]] = {}
    for solution in inner:
        key = tuple(solution.get(v.name) for v in sub.group_by)
        groups.setdefault(key, []).append(solution)
    rows = []
    for key, members in groups.items():
        row: Dict[str, Term] = {}
        for v, value in zip(sub.group_by, key):
            if value is not None:
                row[v.name] = value
        for agg in aggregates:
            if agg.var is None:
                row[agg.alias.name] = literal(len(members))
            else:
                row[agg.alias.name] = literal(
                    sum(1 for m in members if agg.var.name in m)
                )
        for v in plain:
            if v.name not in row and members and v.name in members[0]:
                row[v.name] = members[0][v.name]
        rows.append(row)
    return rows


def _group_solutions(group: Group, triples, universe, initial) -> List[Dict[str, Term]]:
    names = [n for n in _pattern_vars(group) if n not in initial]
    patterns = [m for m in group.members if isinstance(m, TriplePattern)]
    subselects = [m for m in group.members if isinstance(m, SubSelect)]
    solutions: List[Dict[str, Term]] = []
    for combo in itertools.product(universe, repeat=len(names)):
        binding = dict(initial)
        binding.update(dict(zip(names, combo)))
        if all(_check_pattern(p, binding, triples) for p in patterns):
            solutions.append(binding)
    if not patterns and not names:
        solutions = [dict(initial)]
    for sub in subselects:
        rows = _subselect_rows(sub, triples, universe, initial)
        joined = []
        for solution in solutions:
            for row in rows:
                merged = dict(solution)
                compatible = True
                for name, value in row.items():
                    if name in merged and merged[name] != value:
                        compatible = False
                        break
                    merged[name] = value
                if compatible:
                    joined.append(merged)
        solutions = joined
    for f in group.filters:
        solutions = [b for b in solutions if _eval_expr(f.expr, b)]
    return solutions


def brute_force_evaluate(query: Query, quads: Sequence[Quad], initial=None):
    """Enumerate every assignment of query variables to graph terms and keep
    the ones satisfying all patterns, then aggregate/project."""
    triples = {(q.subject, q.predicate, q.object) for q in quads}
    universe = _term_universe(triples)
    initial = dict(initial or {})
    solutions = _group_solutions(query.where, triples, universe, initial)
    if query.form == "ASK":
        return bool(solutions)
    if query.select_star:
        names = sorted({n for b in solutions for n in b} | set(initial))
        return Counter(
            tuple((n, b[n].n3()) for n in names if n in b) for b in solutions
        )
    aggregates = [p for p in query.projection if isinstance(p, CountAggregate)]
    if aggregates or query.group_by:
        sub = SubSelect(query.projection, query.where, query.group_by)
        rows = _subselect_rows(sub, triples, universe, initial)
        names = [
            (p.alias.name if isinstance(p, CountAggregate) else p.name)
            for p in query.projection
        ]
        return Counter(tuple((n, r[n].n3()) for n in names if n in r) for r in rows)
    names = [p.name for p in query.projection]
    return Counter(
        tuple((n, b[n].n3()) for n in names if n in b) for b in solutions
    )


def engine_multiset(query: Query, view, initial=None) -> Counter:
    result = sparql.evaluate(query, view, initial=initial)
    if isinstance(result, bool):
        return result
    if query.select_star:
        return Counter(
            tuple((n, row[n].n3()) for n in sorted(row)) for row in result
        )
    names = [v.name for v in query.variables()]
    return Counter(
        tuple((n, row[n].n3()) for n in names if n in row) for row in result
    )


# naive SHACL oracle, driven by a neutral shape description


@dataclass
class NaiveProperty:
    path: Term
    max_count: Optional[int] = None
    min_count: Optional[int] = None
    datatype: Optional[str] = None
    class_iri: Optional[Term] = None
    node_kind: Optional[str] = None  # IRI | Literal | BlankNode


@dataclass
class NaiveSparql:
    template: str  # 'exactly-one' | 'forbidden-pair'
    guard: Optional[Term] = None  # predicate that must have a value (exactly-one)
    path: Optional[Term] = None
    second: Optional[Term] = None  # second hop predicate (forbidden-pair)


@dataclass
class NaiveShape:
    target_class: Term
    properties: List[NaiveProperty] = field(default_factory=list)
    sparqls: List[NaiveSparql] = field(default_factory=list)


def naive_subclasses(triples, cls: Term) -> Set[Term]:
    subs = {cls}
    changed = True
    while changed:
        changed = False
        for s, p, o in triples:
            if p.value == "http://www.w3.org/2000/01/rdf-schema#subClassOf" and o in subs:
                if s not in subs:
                    subs.add(s)
                    changed = True
    return subs


def naive_validate(quads: Sequence[Quad], shapes: Sequence[NaiveShape]) -> Set[tuple]:
    """Per-focus-node re-check without indexes. Returns a set of
    (focus n3, component local name, path value or '')."""
    triples = [(q.subject, q.predicate, q.object) for q in quads]
    rdf_type = iri(RDF_TYPE)
    results: Set[tuple] = set()
    for shape in shapes:
        accepted = naive_subclasses(triples, shape.target_class)
        focus_nodes = {s for s, p, o in triples if p == rdf_type and o in accepted}
        for focus in focus_nodes:
            for prop in shape.properties:
                values = [o for s, p, o in triples if s == focus and p == prop.path]
                if prop.max_count is not None and len(values) > prop.max_count:
                    results.add((focus.n3(), "MaxCountConstraintComponent", prop.path.value))
                if prop.min_count is not None and len(values) < prop.min_count:
                    results.add((focus.n3(), "MinCountConstraintComponent", prop.path.value))
                if prop.datatype is not None:
                    for v in values:
                        if not v.is_literal or v.datatype != prop.datatype:
                            results.add(
                                (focus.n3(), "DatatypeConstraintComponent", prop.path.value)
                            )
                if prop.class_iri is not None:
                    targets = naive_subclasses(triples, prop.class_iri)
                    for v in values:
                        if v.is_literal or not any(
                            s == v and p == rdf_type and o in targets for s, p, o in triples
                        ):
                            results.add(
                                (focus.n3(), "ClassConstraintComponent", prop.path.value)
                            )
                if prop.node_kind is not None:
                    for v in values:
                        kind_ok = (
                            (prop.node_kind == "IRI" and v.is_iri)
                            or (prop.node_kind == "Literal" and v.is_literal)
                            or (prop.node_kind == "BlankNode" and v.is_blank)
                        )
                        if not kind_ok:
                            results.add(
                                (focus.n3(), "NodeKindConstraintComponent", prop.path.value)
                            )
            for constraint in shape.sparqls:
                if constraint.template == "exactly-one":
                    guarded = any(
                        s == focus and p == constraint.guard for s, p, o in triples
                    )
                    count = sum(
                        1 for s, p, o in triples if s == focus and p == constraint.path
                    )
                    if guarded and count != 1:
                        results.add((focus.n3(), "SPARQLConstraintComponent", ""))
                else:  # forbidden-pair
                    firsts = [o for s, p, o in triples if s == focus and p == constraint.path]
                    hit = any(
                        s in firsts and p == constraint.second for s, p, o in triples
                    )
                    if hit:
                        results.add((focus.n3(), "SPARQLConstraintComponent", ""))
    return results


def report_tuples(report) -> Set[tuple]:
    return {
        (
            r.focus_node.n3(),
            r.component.rsplit("#", 1)[-1],
            r.result_path.value if r.result_path else "",
        )
        for r in report.results
    }
