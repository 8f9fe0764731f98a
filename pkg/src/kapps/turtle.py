"""Turtle subset codec.

Accepts the directive and term syntax used by the bundled ontologies, shape
documents, and validation reports: @prefix/@base, prefixed names, absolute and
base-resolved IRIs, `a`, `;` and `,` lists, blank-node property lists, quoted
and triple-quoted strings, numeric/boolean literals, `^^` datatypes, and
language tags. Unsupported constructs (collections, mid-document @base
redefinition) raise rather than being skipped.

The serializer is deterministic: IRI subjects sort lexicographically, blank
nodes are relabeled `_:b1, _:b2, ...` in first-use order, and identical
statement sets produce byte-identical text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
from urllib.parse import urljoin

from .terms import (
    RDF,
    RDF_TYPE,
    XSD_BOOLEAN,
    XSD_DOUBLE,
    XSD_INTEGER,
    XSD_STRING,
    Term,
    blank,
    escape_string,
    iri,
    is_absolute_iri,
    literal,
)

Triple = Tuple[Term, Term, Term]


class TurtleParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass
class TurtleDocument:
    prefixes: Dict[str, str] = field(default_factory=dict)
    statements: List[Triple] = field(default_factory=list)


_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>\#[^\n]*)
    | (?P<longstring>\"\"\"(?:[^"\\]|\\.|"(?!""))*\"\"\")
    | (?P<string>"(?:[^"\\\n]|\\.)*")
    | (?P<iriref><[^<>"{}|^`\\\s]*>)
    | (?P<prefix_decl>@prefix\b)
    | (?P<base_decl>@base\b)
    | (?P<lang>@[A-Za-z]+(?:-[A-Za-z0-9]+)*)
    | (?P<double>[+-]?(?:\d+\.\d*|\.\d+|\d+)[eE][+-]?\d+)
    | (?P<decimal>[+-]?\d*\.\d+)
    | (?P<integer>[+-]?\d+)
    | (?P<bnode>_:[A-Za-z0-9_][A-Za-z0-9_.\-]*)
    | (?P<pname>(?:[A-Za-z_][A-Za-z0-9_.\-]*)?:(?:[A-Za-z0-9_][A-Za-z0-9_.\-]*)?)
    | (?P<keyword>\b(?:a|true|false)\b)
    | (?P<dtype>\^\^)
    | (?P<punct>[;,.\[\]()])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            col = pos - line_start + 1
            raise TurtleParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok_text = m.group()
        col = pos - line_start + 1
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, tok_text, line, col))
        newlines = tok_text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + tok_text.rindex("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, n - line_start + 1))
    return tokens


def _unescape(body: str, tok: _Token) -> str:
    out = []
    i = 0
    n = len(body)
    while i < n:
        ch = body[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= n:
            raise TurtleParseError("dangling escape", tok.line, tok.column)
        esc = body[i + 1]
        if esc == "n":
            out.append("\n")
        elif esc == "t":
            out.append("\t")
        elif esc == "r":
            out.append("\r")
        elif esc == '"':
            out.append('"')
        elif esc == "\\":
            out.append("\\")
        elif esc == "u":
            out.append(chr(int(body[i + 2 : i + 6], 16)))
            i += 6
            continue
        elif esc == "U":
            out.append(chr(int(body[i + 2 : i + 10], 16)))
            i += 10
            continue
        else:
            raise TurtleParseError(f"unsupported escape \\{esc}", tok.line, tok.column)
        i += 2
    return "".join(out)


class _Parser:
    def __init__(self, text: str, base: Optional[str]):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.base = base
        self.base_set_by_directive = False
        self.doc = TurtleDocument()
        self.blank_counter = 0

    # token helpers

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Optional[_Token] = None):
        tok = tok or self.peek()
        raise TurtleParseError(f"{message} (got {tok.text!r})", tok.line, tok.column)

    def expect(self, kind: str, text: Optional[str] = None) -> _Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            self.error(f"expected {text or kind}", tok)
        return tok

    # grammar

    def parse(self) -> TurtleDocument:
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.kind == "prefix_decl":
                self.next()
                self.parse_prefix()
            elif tok.kind == "base_decl":
                self.next()
                self.parse_base()
            else:
                self.parse_triples()
                self.expect("punct", ".")
        return self.doc

    def parse_prefix(self):
        name_tok = self.expect("pname")
        if not name_tok.text.endswith(":"):
            self.error("prefix declaration must end with ':'", name_tok)
        prefix = name_tok.text[:-1]
        iri_tok = self.expect("iriref")
        self.doc.prefixes[prefix] = self.resolve_iri(iri_tok.text[1:-1], iri_tok)
        self.expect("punct", ".")

    def parse_base(self):
        if self.base_set_by_directive:
            tok = self.peek()
            raise TurtleParseError("@base redefinition is not supported", tok.line, tok.column)
        iri_tok = self.expect("iriref")
        self.base = self.resolve_iri(iri_tok.text[1:-1], iri_tok)
        self.base_set_by_directive = True
        self.expect("punct", ".")

    def resolve_iri(self, text: str, tok: _Token) -> str:
        if is_absolute_iri(text):
            return text
        if self.base is None:
            raise TurtleParseError(f"relative IRI {text!r} without a base", tok.line, tok.column)
        resolved = urljoin(self.base, text)
        if not is_absolute_iri(resolved):
            raise TurtleParseError(f"cannot resolve {text!r} against base", tok.line, tok.column)
        return resolved

    def fresh_blank(self) -> Term:
        self.blank_counter += 1
        return blank(f"anon{self.blank_counter}")

    def parse_triples(self):
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "[":
            subject = self.parse_blank_node_property_list()
            if self.peek().kind == "punct" and self.peek().text == ".":
                return  # bare [ ... ] . statement
            self.parse_predicate_object_list(subject)
        else:
            subject = self.parse_term(position="subject")
            self.parse_predicate_object_list(subject)

    def parse_predicate_object_list(self, subject: Term):
        while True:
            predicate = self.parse_verb()
            while True:
                obj = self.parse_object()
                self.doc.statements.append((subject, predicate, obj))
                if self.peek().kind == "punct" and self.peek().text == ",":
                    self.next()
                    continue
                break
            if self.peek().kind == "punct" and self.peek().text == ";":
                self.next()
                # allow trailing ';' before '.' or ']'
                nxt = self.peek()
                if nxt.kind == "punct" and nxt.text in (".", "]"):
                    return
                continue
            return

    def parse_verb(self) -> Term:
        tok = self.peek()
        if tok.kind == "keyword" and tok.text == "a":
            self.next()
            return iri(RDF_TYPE)
        term = self.parse_term(position="predicate")
        if not term.is_iri:
            self.error("predicate must be an IRI", tok)
        return term

    def parse_object(self) -> Term:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "[":
            return self.parse_blank_node_property_list()
        if tok.kind == "punct" and tok.text == "(":
            raise TurtleParseError("RDF collections '( )' are not supported", tok.line, tok.column)
        return self.parse_term(position="object")

    def parse_blank_node_property_list(self) -> Term:
        self.expect("punct", "[")
        node = self.fresh_blank()
        if self.peek().kind == "punct" and self.peek().text == "]":
            self.next()
            return node
        self.parse_predicate_object_list(node)
        self.expect("punct", "]")
        return node

    def parse_term(self, position: str) -> Term:
        tok = self.next()
        if tok.kind == "iriref":
            return iri(self.resolve_iri(_unescape(tok.text[1:-1], tok), tok))
        if tok.kind == "pname":
            prefix, _, local = tok.text.partition(":")
            if prefix not in self.doc.prefixes:
                self.error(f"undeclared prefix {prefix!r}", tok)
            return iri(self.doc.prefixes[prefix] + local)
        if tok.kind == "bnode":
            if position == "predicate":
                self.error("blank node cannot be a predicate", tok)
            return blank(tok.text[2:])
        if position != "object" and tok.kind in (
            "string",
            "longstring",
            "integer",
            "decimal",
            "double",
        ):
            self.error(f"literal not allowed as {position}", tok)
        if tok.kind in ("string", "longstring"):
            return self.finish_literal(tok)
        if tok.kind == "integer":
            return literal(tok.text, XSD_INTEGER)
        if tok.kind in ("decimal", "double"):
            # Decimal-form numerics map to xsd:double so FILTER comparisons
            # stay value-based for every numeric the codec can produce.
            return literal(tok.text, XSD_DOUBLE)
        if tok.kind == "keyword" and tok.text in ("true", "false"):
            if position != "object":
                self.error(f"literal not allowed as {position}", tok)
            return literal(tok.text, XSD_BOOLEAN)
        if tok.kind == "punct" and tok.text == "(":
            raise TurtleParseError("RDF collections '( )' are not supported", tok.line, tok.column)
        self.error(f"unexpected token in {position} position", tok)

    def finish_literal(self, tok: _Token) -> Term:
        if tok.kind == "longstring":
            body = tok.text[3:-3]
        else:
            body = tok.text[1:-1]
        value = _unescape(body, tok)
        nxt = self.peek()
        if nxt.kind == "dtype":
            self.next()
            dt = self.parse_term(position="predicate")
            return literal(value, dt.value)
        if nxt.kind == "lang":
            self.next()
            return literal(value, language=nxt.text[1:])
        return literal(value, XSD_STRING)


def parse(text: str, base: Optional[str] = None) -> TurtleDocument:
    return _Parser(text, base).parse()


# serialization


def _abbreviate(value: str, prefixes: Dict[str, str]) -> Optional[str]:
    best = None
    for prefix, ns in prefixes.items():
        if value.startswith(ns) and (best is None or len(ns) > len(prefixes[best])):
            local = value[len(ns) :]
            if re.fullmatch(r"(?:[A-Za-z0-9_][A-Za-z0-9_.\-]*)?", local) and not local.endswith("."):
                best = prefix
    if best is None:
        return None
    return f"{best}:{value[len(prefixes[best]):]}"


class _Serializer:
    def __init__(self, prefixes: Dict[str, str]):
        self.prefixes = dict(prefixes)
        self.labels: Dict[str, str] = {}

    def label_for(self, term: Term) -> str:
        if term.value not in self.labels:
            self.labels[term.value] = f"b{len(self.labels) + 1}"
        return f"_:{self.labels[term.value]}"

    def render(self, term: Term) -> str:
        if term.is_iri:
            return _abbreviate(term.value, self.prefixes) or f"<{term.value}>"
        if term.is_blank:
            return self.label_for(term)
        return self.render_literal(term)

    def render_literal(self, term: Term) -> str:
        value = term.value
        if "\n" in value and "\\" not in value and '"""' not in value and not value.endswith('"'):
            quoted = f'"""{value}"""'
        else:
            quoted = f'"{escape_string(value)}"'
        if term.language:
            return f"{quoted}@{term.language}"
        if term.datatype == XSD_STRING:
            return quoted
        dt = _abbreviate(term.datatype, self.prefixes) or f"<{term.datatype}>"
        return f"{quoted}^^{dt}"

    def content_key(self, subject: Term, by_subject) -> str:
        parts = []
        for p, o in sorted(
            ((p, o) for p, o in by_subject.get(subject, ())),
            key=lambda po: (po[0].value, "[]" if po[1].is_blank else po[1].n3()),
        ):
            parts.append(p.value + " " + ("[]" if o.is_blank else o.n3()))
        return "; ".join(parts)


def serialize(statements, prefixes: Dict[str, str]) -> str:
    """Deterministic Turtle text for a set of (s, p, o) triples."""
    ser = _Serializer(prefixes)
    by_subject: Dict[Term, List[Tuple[Term, Term]]] = {}
    objects_of: Dict[Term, int] = {}
    for s, p, o in statements:
        by_subject.setdefault(s, []).append((p, o))
        if o.is_blank:
            objects_of[o] = objects_of.get(o, 0) + 1

    iri_subjects = sorted((s for s in by_subject if s.is_iri), key=lambda t: t.value)
    blank_roots = sorted(
        (s for s in by_subject if s.is_blank and s not in objects_of),
        key=lambda t: (ser.content_key(t, by_subject), t.value),
    )

    # Emission order: IRI subjects, then blank roots, then any blank subjects
    # reachable only as objects (emitted in first-reference order).
    emitted = set()
    queue = list(iri_subjects) + list(blank_roots)
    order: List[Term] = []
    while queue:
        s = queue.pop(0)
        if s in emitted or s not in by_subject:
            continue
        emitted.add(s)
        order.append(s)
        for _, o in sorted(
            by_subject[s],
            key=lambda po: (_pred_rank(po[0]), po[0].value, _obj_key(ser, po[1], by_subject)),
        ):
            if o.is_blank and o not in emitted and o in by_subject:
                queue.append(o)
    leftovers = sorted(
        (s for s in by_subject if s not in emitted),
        key=lambda t: (ser.content_key(t, by_subject), t.value),
    )
    order.extend(leftovers)

    lines = []
    for prefix in sorted(prefixes):
        lines.append(f"@prefix {prefix}: <{prefixes[prefix]}> .")
    if prefixes and order:
        lines.append("")
    for s in order:
        pairs = sorted(
            by_subject[s],
            key=lambda po: (_pred_rank(po[0]), po[0].value, _obj_key(ser, po[1], by_subject)),
        )
        subject_text = ser.render(s)
        body = []
        for i, (p, o) in enumerate(pairs):
            sep = " ;" if i < len(pairs) - 1 else " ."
            pred_text = ser.render(p)
            obj_text = ser.render(o)
            if i == 0:
                body.append(f"{subject_text} {pred_text} {obj_text}{sep}")
            else:
                body.append(f"    {pred_text} {obj_text}{sep}")
        lines.extend(body)
        lines.append("")
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines) + "\n"


def _pred_rank(p: Term) -> int:
    return 0 if p.value == RDF_TYPE else 1


def _obj_key(ser: _Serializer, o: Term, by_subject) -> str:
    if o.is_blank:
        return "~" + ser.content_key(o, by_subject)
    return o.n3()
