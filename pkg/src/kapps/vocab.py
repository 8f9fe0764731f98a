"""Namespace constants and frequently used terms for the bundled vocabularies."""

from .terms import iri

CFC = "http://w3id.org/circularfactory/Core#"
SRV = "http://w3id.org/circularfactory/Service#"
FC = "http://w3id.org/circularfactory/FlexConveyor#"
FCI = "http://w3id.org/circularfactory/FlexConveyorInstances#"
UC = "http://w3id.org/circularfactory/Unscrewing#"
UCI = "http://w3id.org/circularfactory/UnscrewingInstances#"


def cfc(name: str):
    return iri(CFC + name)


def srv(name: str):
    return iri(SRV + name)


def fc(name: str):
    return iri(FC + name)


def fci(name: str):
    return iri(FCI + name)


def uc(name: str):
    return iri(UC + name)


def uci(name: str):
    return iri(UCI + name)


PREFIXES = {
    "cfc": CFC,
    "srv": SRV,
    "fc": FC,
    "fci": FCI,
    "uc": UC,
    "uci": UCI,
    "rdf": "http://www.w3.org/1999/02/22-rdf-syntax-ns#",
    "rdfs": "http://www.w3.org/2000/01/rdf-schema#",
    "owl": "http://www.w3.org/2002/07/owl#",
    "xsd": "http://www.w3.org/2001/XMLSchema#",
    "sh": "http://www.w3.org/ns/shacl#",
    "prov": "http://www.w3.org/ns/prov#",
}
