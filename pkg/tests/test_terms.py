import pytest

from kapps.terms import (
    RDF_LANGSTRING,
    XSD_BOOLEAN,
    XSD_DATETIME,
    XSD_INTEGER,
    XSD_STRING,
    Quad,
    Term,
    TermError,
    blank,
    iri,
    literal,
)


def test_iri_must_be_absolute():
    with pytest.raises(TermError):
        iri("relative/path")
    assert iri("urn:kapps:default").is_iri


def test_literal_datatype_defaults_to_string():
    assert literal("hello").datatype == XSD_STRING


def test_language_tag_forces_langstring():
    term = literal("hallo", language="de")
    assert term.datatype == RDF_LANGSTRING


def test_integer_equality_is_value_based():
    assert literal("01", XSD_INTEGER) == literal("1", XSD_INTEGER)
    assert hash(literal("01", XSD_INTEGER)) == hash(literal("1", XSD_INTEGER))


def test_cross_datatype_literals_differ():
    assert literal("1", XSD_INTEGER) != literal("1", XSD_STRING)


def test_unknown_datatype_compares_lexically():
    custom = "http://example.org/custom"
    assert literal("01", custom) != literal("1", custom)
    assert literal("1", custom) == literal("1", custom)


def test_datetime_value_comparison():
    a = literal("2024-03-15T14:32:00Z", XSD_DATETIME)
    b = literal("2024-03-15T14:32:00+00:00", XSD_DATETIME)
    assert a == b


def test_invalid_lexical_form_falls_back_to_lexical():
    bad = literal("not-a-number", XSD_INTEGER)
    assert bad != literal("1", XSD_INTEGER)
    assert bad == literal("not-a-number", XSD_INTEGER)


def test_boolean_python_roundtrip():
    assert literal(True).python_value() is True
    assert literal("false", XSD_BOOLEAN).python_value() is False


def test_quad_positional_invariants():
    s, p, o = iri("urn:x:s"), iri("urn:x:p"), iri("urn:x:o")
    g = iri("urn:x:g")
    with pytest.raises(TermError):
        Quad(literal("no"), p, o, g)
    with pytest.raises(TermError):
        Quad(s, blank("b"), o, g)
    with pytest.raises(TermError):
        Quad(s, literal("no"), o, g)
    assert Quad(blank("b"), p, literal("fine"), g)
