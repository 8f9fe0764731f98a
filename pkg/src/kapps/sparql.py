"""Read-only SPARQL subset: SELECT/ASK over basic graph patterns, FILTER
comparisons with &&/||/!, and nested `{ SELECT ... GROUP BY }` with COUNT.

`$this` is an ordinary variable named `this`; constraint integrations pre-bind
it through the `initial` binding set. Triple patterns match the union of all
named graphs in the snapshot. Evaluation is deterministic: joins run left to
right as written, and SELECT output is sorted by the rendered projected terms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

from .terms import (
    NUMERIC_DATATYPES,
    RDF,
    RDF_TYPE,
    XSD,
    XSD_BOOLEAN,
    XSD_DATETIME,
    XSD_DOUBLE,
    XSD_INTEGER,
    XSD_STRING,
    Term,
    iri,
    literal,
)

BASE_PREFIXES = {
    "rdf": RDF,
    "rdfs": "http://www.w3.org/2000/01/rdf-schema#",
    "xsd": XSD,
    "sh": "http://www.w3.org/ns/shacl#",
    "owl": "http://www.w3.org/2002/07/owl#",
}

UNSUPPORTED_KEYWORDS = {
    "OPTIONAL", "UNION", "MINUS", "GRAPH", "BIND", "VALUES", "SERVICE",
    "CONSTRUCT", "DESCRIBE", "INSERT", "DELETE", "ORDER", "LIMIT", "OFFSET",
    "HAVING", "EXISTS", "DISTINCT", "REDUCED",
}


class QueryParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"at offset {position}: {message}")
        self.position = position


class UnsupportedFeature(QueryParseError):
    def __init__(self, feature: str, position: int):
        QueryParseError.__init__(self, f"unsupported SPARQL feature: {feature}", position)
        self.feature = feature


class FilterTypeError(TypeError):
    """Ordering comparison over non-numeric, non-orderable operands."""


@dataclass(frozen=True)
class Variable:
    name: str


PatternTerm = Union[Term, Variable]


@dataclass(frozen=True)
class TriplePattern:
    s: PatternTerm
    p: PatternTerm
    o: PatternTerm


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Union[Variable, Term]
    right: Union[Variable, Term]


@dataclass(frozen=True)
class BoolExpr:
    op: str  # 'and' | 'or' | 'not'
    args: Tuple[object, ...]


@dataclass(frozen=True)
class Filter:
    expr: object


@dataclass
class SubSelect:
    projection: List[object]
    group: "Group"
    group_by: List[Variable]


@dataclass
class CountAggregate:
    var: Optional[Variable]  # None means COUNT(*)
    alias: Variable


@dataclass
class Group:
    members: List[object] = field(default_factory=list)  # TriplePattern | SubSelect
    filters: List[Filter] = field(default_factory=list)


@dataclass
class Query:
    form: str  # 'SELECT' | 'ASK'
    projection: List[object]  # Variable | CountAggregate ('*' expands at eval)
    where: Group
    prefixes: Dict[str, str]
    select_star: bool = False
    group_by: List[Variable] = field(default_factory=list)

    def variables(self) -> List[Variable]:
        seen: List[Variable] = []
        for item in self.projection:
            v = item.alias if isinstance(item, CountAggregate) else item
            if v not in seen:
                seen.append(v)
        return seen


BindingSet = Dict[str, Term]


# parser

_Q_TOKEN = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>\#[^\n]*)
    | (?P<iriref><[^<>"{}|^`\\\s]*>)
    | (?P<string>"(?:[^"\\\n]|\\.)*")
    | (?P<var>[?$][A-Za-z_][A-Za-z0-9_]*)
    | (?P<double>[+-]?(?:\d+\.\d*|\.\d+|\d+)[eE][+-]?\d+)
    | (?P<decimal>[+-]?\d*\.\d+)
    | (?P<integer>[+-]?\d+)
    | (?P<pname>(?:[A-Za-z_][A-Za-z0-9_.\-]*)?:(?:[A-Za-z0-9_][A-Za-z0-9_.\-]*)?)
    | (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<op><=|>=|!=|&&|\|\||[=<>!])
    | (?P<dtype>\^\^)
    | (?P<punct>[{}().;,*])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _scan(text: str) -> List[_Tok]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _Q_TOKEN.match(text, pos)
        if m is None:
            raise QueryParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup not in ("ws", "comment"):
            tokens.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(_Tok("eof", "", pos))
    return tokens


class _QueryParser:
    def __init__(self, text: str):
        self.tokens = _scan(text)
        self.i = 0
        self.prefixes: Dict[str, str] = dict(BASE_PREFIXES)

    def peek(self) -> _Tok:
        return self.tokens[self.i]

    def next(self) -> _Tok:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str):
        raise QueryParseError(f"{message} (got {self.peek().text!r})", self.peek().pos)

    def at_word(self, *words: str) -> bool:
        tok = self.peek()
        return tok.kind == "word" and tok.text.upper() in words

    def expect_word(self, word: str):
        if not self.at_word(word):
            self.error(f"expected {word}")
        self.next()

    def expect_punct(self, text: str):
        tok = self.next()
        if tok.kind != "punct" or tok.text != text:
            raise QueryParseError(f"expected {text!r} (got {tok.text!r})", tok.pos)

    def check_unsupported(self):
        tok = self.peek()
        if tok.kind == "word" and tok.text.upper() in UNSUPPORTED_KEYWORDS:
            raise UnsupportedFeature(tok.text.upper(), tok.pos)

    def parse(self) -> Query:
        while self.at_word("PREFIX"):
            self.next()
            name = self.next()
            if name.kind != "pname" or not name.text.endswith(":"):
                raise QueryParseError("expected prefix name", name.pos)
            ref = self.next()
            if ref.kind != "iriref":
                raise QueryParseError("expected IRI in PREFIX", ref.pos)
            self.prefixes[name.text[:-1]] = ref.text[1:-1]
        if self.at_word("SELECT"):
            self.next()
            return self.parse_select(top=True)
        if self.at_word("ASK"):
            self.next()
            group = self.parse_group()
            return Query("ASK", [], group, self.prefixes)
        self.check_unsupported()
        self.error("expected SELECT or ASK")

    def parse_select(self, top: bool) -> Query:
        self.check_unsupported()
        projection: List[object] = []
        star = False
        if self.peek().kind == "punct" and self.peek().text == "*":
            self.next()
            star = True
        else:
            while True:
                tok = self.peek()
                if tok.kind == "var":
                    projection.append(Variable(self.next().text[1:]))
                elif tok.kind == "punct" and tok.text == "(":
                    projection.append(self.parse_aggregate())
                else:
                    break
            if not projection:
                self.error("empty SELECT projection")
        if self.at_word("WHERE"):
            self.next()
        group = self.parse_group()
        group_by: List[Variable] = []
        if self.at_word("GROUP"):
            self.next()
            self.expect_word("BY")
            while self.peek().kind == "var":
                group_by.append(Variable(self.next().text[1:]))
            if not group_by:
                self.error("empty GROUP BY")
        query = Query("SELECT", projection, group, self.prefixes, star, group_by)
        if top:
            self.check_unsupported()
            if self.peek().kind != "eof":
                self.error("trailing input after query")
            self.validate(query)
        return query

    def parse_aggregate(self) -> CountAggregate:
        self.expect_punct("(")
        if not self.at_word("COUNT"):
            self.error("only COUNT aggregates are supported")
        self.next()
        self.expect_punct("(")
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "*":
            self.next()
            var = None
        elif tok.kind == "var":
            var = Variable(self.next().text[1:])
        else:
            self.error("expected variable or * in COUNT")
        self.expect_punct(")")
        self.expect_word("AS")
        alias_tok = self.next()
        if alias_tok.kind != "var":
            raise QueryParseError("expected alias variable after AS", alias_tok.pos)
        self.expect_punct(")")
        return CountAggregate(var, Variable(alias_tok.text[1:]))

    def parse_group(self) -> Group:
        self.expect_punct("{")
        group = Group()
        while True:
            tok = self.peek()
            if tok.kind == "punct" and tok.text == "}":
                self.next()
                return group
            if tok.kind == "eof":
                self.error("unterminated group")
            self.check_unsupported()
            if self.at_word("FILTER"):
                self.next()
                group.filters.append(Filter(self.parse_expr_parens()))
                self.maybe_dot()
            elif tok.kind == "punct" and tok.text == "{":
                self.next()
                if not self.at_word("SELECT"):
                    self.check_unsupported()
                    self._scan_for_union(tok.pos)
                    self.error("only nested SELECT groups are supported")
                self.next()
                inner = self.parse_select(top=False)
                self.expect_punct("}")
                group.members.append(SubSelect(inner.projection, inner.where, inner.group_by))
                self.maybe_dot()
            else:
                self.parse_triples_block(group)
        return group

    def _scan_for_union(self, position: int):
        """A bare nested group usually means UNION; name it if it is ahead."""
        depth = 1
        for tok in self.tokens[self.i :]:
            if tok.kind == "punct" and tok.text == "{":
                depth += 1
            elif tok.kind == "punct" and tok.text == "}":
                depth -= 1
                if depth < 0:
                    break
            elif depth == 0 and tok.kind == "word" and tok.text.upper() == "UNION":
                raise UnsupportedFeature("UNION", position)

    def maybe_dot(self):
        if self.peek().kind == "punct" and self.peek().text == ".":
            self.next()

    def parse_triples_block(self, group: Group):
        s = self.parse_pattern_term(position="subject")
        while True:
            p = self.parse_verb()
            while True:
                o = self.parse_pattern_term(position="object")
                group.members.append(TriplePattern(s, p, o))
                if self.peek().kind == "punct" and self.peek().text == ",":
                    self.next()
                    continue
                break
            if self.peek().kind == "punct" and self.peek().text == ";":
                self.next()
                nxt = self.peek()
                if nxt.kind == "punct" and nxt.text in (".", "}"):
                    break
                continue
            break
        self.maybe_dot()

    def parse_verb(self) -> PatternTerm:
        if self.at_word("A"):
            tok = self.peek()
            if tok.text == "a":
                self.next()
                return iri(RDF_TYPE)
        return self.parse_pattern_term(position="predicate")

    def parse_pattern_term(self, position: str) -> PatternTerm:
        self.check_unsupported()
        tok = self.next()
        if tok.kind == "var":
            return Variable(tok.text[1:])
        if tok.kind == "iriref":
            return iri(tok.text[1:-1])
        if tok.kind == "pname":
            prefix, _, local = tok.text.partition(":")
            if prefix not in self.prefixes:
                raise QueryParseError(f"undeclared prefix {prefix!r}", tok.pos)
            return iri(self.prefixes[prefix] + local)
        if position == "object":
            if tok.kind == "string":
                value = _unquote(tok.text)
                if self.peek().kind == "dtype":
                    self.next()
                    dt = self.parse_pattern_term(position="predicate")
                    if isinstance(dt, Variable) or not dt.is_iri:
                        raise QueryParseError("datatype must be an IRI", tok.pos)
                    return literal(value, dt.value)
                return literal(value, XSD_STRING)
            if tok.kind == "integer":
                return literal(tok.text, XSD_INTEGER)
            if tok.kind in ("decimal", "double"):
                return literal(tok.text, XSD_DOUBLE)
            if tok.kind == "word" and tok.text in ("true", "false"):
                return literal(tok.text, XSD_BOOLEAN)
        raise QueryParseError(f"unexpected token in {position} position: {tok.text!r}", tok.pos)

    # FILTER expressions: precedence ! > comparison > && > ||

    def parse_expr_parens(self):
        self.expect_punct("(")
        expr = self.parse_or()
        self.expect_punct(")")
        return expr

    def parse_or(self):
        left = self.parse_and()
        while self.peek().kind == "op" and self.peek().text == "||":
            self.next()
            left = BoolExpr("or", (left, self.parse_and()))
        return left

    def parse_and(self):
        left = self.parse_unary()
        while self.peek().kind == "op" and self.peek().text == "&&":
            self.next()
            left = BoolExpr("and", (left, self.parse_unary()))
        return left

    def parse_unary(self):
        tok = self.peek()
        if tok.kind == "op" and tok.text == "!":
            self.next()
            return BoolExpr("not", (self.parse_unary(),))
        if tok.kind == "punct" and tok.text == "(":
            return self.parse_expr_parens()
        return self.parse_comparison()

    def parse_comparison(self):
        left = self.parse_operand()
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("=", "!=", "<", "<=", ">", ">="):
            self.next()
            right = self.parse_operand()
            return Comparison(tok.text, left, right)
        self.error("expected comparison operator")

    def parse_operand(self):
        tok = self.next()
        if tok.kind == "var":
            return Variable(tok.text[1:])
        if tok.kind == "integer":
            return literal(tok.text, XSD_INTEGER)
        if tok.kind in ("decimal", "double"):
            return literal(tok.text, XSD_DOUBLE)
        if tok.kind == "string":
            return literal(_unquote(tok.text), XSD_STRING)
        if tok.kind == "word" and tok.text in ("true", "false"):
            return literal(tok.text, XSD_BOOLEAN)
        if tok.kind == "iriref":
            return iri(tok.text[1:-1])
        if tok.kind == "pname":
            prefix, _, local = tok.text.partition(":")
            if prefix not in self.prefixes:
                raise QueryParseError(f"undeclared prefix {prefix!r}", tok.pos)
            return iri(self.prefixes[prefix] + local)
        raise QueryParseError(f"unexpected operand {tok.text!r}", tok.pos)

    def validate(self, query: Query):
        bound = _group_variables(query.where)
        for item in query.projection:
            if isinstance(item, Variable) and item.name not in bound:
                raise QueryParseError(f"projected variable ?{item.name} is never bound", 0)


def _unquote(text: str) -> str:
    body = text[1:-1]
    return (
        body.replace("\\\\", "\x00")
        .replace('\\"', '"')
        .replace("\\n", "\n")
        .replace("\\t", "\t")
        .replace("\\r", "\r")
        .replace("\x00", "\\")
    )


def _group_variables(group: Group) -> set:
    names = set()
    for member in group.members:
        if isinstance(member, TriplePattern):
            for t in (member.s, member.p, member.o):
                if isinstance(t, Variable):
                    names.add(t.name)
        elif isinstance(member, SubSelect):
            for item in member.projection:
                v = item.alias if isinstance(item, CountAggregate) else item
                names.add(v.name)
    return names


def parse_query(text: str) -> Query:
    return _QueryParser(text).parse()


@lru_cache(maxsize=1024)
def parse_query_cached(text: str) -> Query:
    """Shared parse for hot callers (discovery runs the same text per tick);
    evaluation never mutates the Query, so reuse is safe."""
    return parse_query(text)


# evaluation


def _solution_key(solution: BindingSet, names: List[str]) -> tuple:
    return tuple(solution[n].n3() if n in solution else "" for n in names)


class _Evaluator:
    def __init__(self, view, default_zero_groups: bool = False):
        self.view = view
        self.default_zero_groups = default_zero_groups

    def match_pattern(self, pattern: TriplePattern, binding: BindingSet) -> List[BindingSet]:
        def resolve(t: PatternTerm):
            if isinstance(t, Variable):
                return binding.get(t.name)
            return t

        s, p, o = resolve(pattern.s), resolve(pattern.p), resolve(pattern.o)
        out = []
        for q in self.view.match(s, p, o):
            extended = dict(binding)
            ok = True
            for slot, value in ((pattern.s, q.subject), (pattern.p, q.predicate), (pattern.o, q.object)):
                if isinstance(slot, Variable):
                    existing = extended.get(slot.name)
                    if existing is None:
                        extended[slot.name] = value
                    elif existing != value:
                        ok = False
                        break
            if ok:
                out.append(extended)
        return out

    def eval_group(self, group: Group, initial: BindingSet) -> List[BindingSet]:
        solutions = [dict(initial)]
        for member in group.members:
            if isinstance(member, TriplePattern):
                solutions = [ext for b in solutions for ext in self.match_pattern(member, b)]
            else:
                rows = self.eval_subselect(member, initial)
                solutions = [merged for b in solutions for merged in _join(b, rows)]
            if not solutions:
                break
        for f in group.filters:
            solutions = [b for b in solutions if self.eval_expr(f.expr, b)]
        return solutions

    def eval_subselect(self, sub: SubSelect, initial: BindingSet) -> List[BindingSet]:
        inner = self.eval_group(sub.group, initial)
        return self.project(sub.projection, sub.group_by, inner, initial)

    def project(
        self,
        projection: List[object],
        group_by: List[Variable],
        solutions: List[BindingSet],
        initial: BindingSet,
    ) -> List[BindingSet]:
        aggregates = [p for p in projection if isinstance(p, CountAggregate)]
        plain = [p for p in projection if isinstance(p, Variable)]
        if not aggregates and not group_by:
            return [{v.name: b[v.name] for v in plain if v.name in b} for b in solutions]

        groups: Dict[tuple, List[BindingSet]] = {}
        key_vars = group_by or []
        for b in solutions:
            key = tuple(b.get(v.name) for v in key_vars)
            groups.setdefault(key, []).append(b)
        if (
            self.default_zero_groups
            and not groups
            and key_vars
            and all(v.name in initial for v in key_vars)
        ):
            # Constraint-integration mode: a fully pre-bound group with no
            # matches still yields one row with zero counts, so exactly-one
            # checks can flag the zero case.
            groups[tuple(initial[v.name] for v in key_vars)] = []
        rows = []
        for key, members in groups.items():
            row: BindingSet = {}
            for v, value in zip(key_vars, key):
                if value is not None:
                    row[v.name] = value
            for agg in aggregates:
                if agg.var is None:
                    count = len(members)
                else:
                    count = sum(1 for m in members if agg.var.name in m)
                row[agg.alias.name] = literal(count)
            for v in plain:
                if v not in key_vars:
                    # non-grouped plain projection: take it from the group key
                    # only, anything else is rejected at parse time in practice
                    if members and v.name in members[0]:
                        row[v.name] = members[0][v.name]
            rows.append(row)
        return rows

    def eval_expr(self, expr, binding: BindingSet) -> bool:
        if isinstance(expr, BoolExpr):
            if expr.op == "and":
                return all(self.eval_expr(a, binding) for a in expr.args)
            if expr.op == "or":
                return any(self.eval_expr(a, binding) for a in expr.args)
            return not self.eval_expr(expr.args[0], binding)
        if isinstance(expr, Comparison):
            return self.eval_comparison(expr, binding)
        raise FilterTypeError(f"unknown expression {expr!r}")

    def eval_comparison(self, cmp: Comparison, binding: BindingSet) -> bool:
        left = self.resolve_operand(cmp.left, binding)
        right = self.resolve_operand(cmp.right, binding)
        if left is None or right is None:
            return False  # unbound operand: comparison cannot hold
        if cmp.op in ("=", "!="):
            equal = left == right
            return equal if cmp.op == "=" else not equal
        lv, rv = _order_value(left), _order_value(right)
        if lv is None or rv is None or type(lv) is not type(rv) and not (
            isinstance(lv, (int, float)) and isinstance(rv, (int, float))
        ):
            raise FilterTypeError(
                f"cannot order {left.n3()} against {right.n3()} with {cmp.op}"
            )
        if cmp.op == "<":
            return lv < rv
        if cmp.op == "<=":
            return lv <= rv
        if cmp.op == ">":
            return lv > rv
        return lv >= rv

    def resolve_operand(self, operand, binding: BindingSet) -> Optional[Term]:
        if isinstance(operand, Variable):
            return binding.get(operand.name)
        return operand


def _order_value(term: Term):
    if not term.is_literal:
        return None
    if term.datatype in NUMERIC_DATATYPES:
        return term.numeric_value()
    if term.datatype == XSD_STRING:
        return term.value
    if term.datatype == XSD_DATETIME:
        value = term.python_value()
        return value if not isinstance(value, str) else None
    return None


def _join(binding: BindingSet, rows: List[BindingSet]) -> List[BindingSet]:
    out = []
    for row in rows:
        merged = dict(binding)
        ok = True
        for name, value in row.items():
            existing = merged.get(name)
            if existing is None:
                merged[name] = value
            elif existing != value:
                ok = False
                break
        if ok:
            out.append(merged)
    return out


def evaluate(
    query: Query,
    view,
    initial: Optional[BindingSet] = None,
    default_zero_groups: bool = False,
) -> Union[List[BindingSet], bool]:
    """Run a parsed query over a snapshot, optionally pre-binding variables."""
    initial = dict(initial or {})
    ev = _Evaluator(view, default_zero_groups)
    solutions = ev.eval_group(query.where, initial)
    if query.form == "ASK":
        return bool(solutions)
    if query.select_star:
        names = sorted({n for b in solutions for n in b} | set(initial))
        projected = [{n: b[n] for n in names if n in b} for b in solutions]
    else:
        projected = ev.project(query.projection, query.group_by, solutions, initial)
        names = [v.name for v in query.variables()]
    projected.sort(key=lambda b: _solution_key(b, names or sorted({n for r in projected for n in r})))
    return projected
