"""Service middleware: registration in the graph, discovery via queries,
workflow invocation over a transport, and the connector contract.

A service individual and its workflow individuals persist across shutdowns;
only the address property tracks availability. Discovery therefore answers
"what exists" and "what is invokeable" from the same graph, and deregistering
a service retracts nothing but its address.

Transports carry one request/response per invocation. The in-process loopback
transport is the default; the TCP transport speaks one JSON document per
connection with payloads {workflow, args{}} and {ok, outcome|fault}.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import shacl, sparql
from .ogm import CommitRejected, Ogm
from .shacl import ValidationReport
from .store import StoreSnapshot
from .terms import (
    RDF_TYPE,
    XSD_ANYURI,
    XSD_BOOLEAN,
    XSD_DOUBLE,
    XSD_INTEGER,
    XSD_STRING,
    Term,
    iri,
)
from .vocab import PREFIXES, SRV, srv


class MiddlewareError(Exception):
    pass


class NotConnected(MiddlewareError):
    pass


class TransportUnreachable(MiddlewareError):
    pass


class UnknownService(MiddlewareError):
    pass


class ReplayFormatError(ValueError):
    pass


@dataclass
class WorkflowDescriptor:
    workflow_iri: Term
    workflow_class: Term
    parameters: List[Tuple[str, str]] = field(default_factory=list)  # (name, datatype IRI)
    outcome: Tuple[str, str] = ("result", XSD_STRING)


@dataclass
class ServiceDescriptor:
    service_iri: Term
    service_class: Term
    provided_by: Optional[Term] = None
    address: Optional[str] = None
    workflows: List[WorkflowDescriptor] = field(default_factory=list)


@dataclass
class Fault:
    kind: str  # transport-unreachable | argument-mismatch | handler-error | commit-rejected
    detail: str
    report: Optional[ValidationReport] = None


@dataclass
class InvocationResult:
    ok: bool
    outcome: object = None
    fault: Optional[Fault] = None


# transports


class Transport:
    def register_endpoint(self, dispatcher: Callable[[dict], dict]) -> str:
        raise NotImplementedError

    def release_endpoint(self, address: str):
        raise NotImplementedError

    def request(self, address: str, payload: dict) -> dict:
        raise NotImplementedError


class LoopbackTransport(Transport):
    """In-process request/response over `kapps-local://<node-id>` addresses."""

    def __init__(self):
        self._endpoints: Dict[str, Callable[[dict], dict]] = {}
        self._counter = 0
        self._lock = threading.Lock()

    def register_endpoint(self, dispatcher) -> str:
        with self._lock:
            self._counter += 1
            address = f"kapps-local://node{self._counter}"
            self._endpoints[address] = dispatcher
        return address

    def release_endpoint(self, address: str):
        with self._lock:
            self._endpoints.pop(address, None)

    def request(self, address: str, payload: dict) -> dict:
        dispatcher = self._endpoints.get(address)
        if dispatcher is None:
            raise TransportUnreachable(address)
        return json.loads(json.dumps(dispatcher(json.loads(json.dumps(payload)))))


class TcpTransport(Transport):
    """One JSON request/response per TCP connection."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self._servers: Dict[str, socketserver.ThreadingTCPServer] = {}
        self._lock = threading.Lock()

    def register_endpoint(self, dispatcher) -> str:
        transport = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                raw = self.rfile.readline()
                try:
                    payload = json.loads(raw.decode("utf-8"))
                    response = dispatcher(payload)
                except Exception as exc:  # malformed request must not kill the server
                    response = {"ok": False, "fault": {"kind": "handler-error", "detail": str(exc)}}
                self.wfile.write(json.dumps(response).encode("utf-8") + b"\n")

        server = socketserver.ThreadingTCPServer((self.host, 0), Handler)
        server.daemon_threads = True
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        address = f"tcp://{self.host}:{server.server_address[1]}"
        with self._lock:
            self._servers[address] = server
        return address

    def release_endpoint(self, address: str):
        with self._lock:
            server = self._servers.pop(address, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def request(self, address: str, payload: dict) -> dict:
        host, _, port = address.removeprefix("tcp://").partition(":")
        try:
            with socket.create_connection((host, int(port)), timeout=10) as conn:
                conn.sendall(json.dumps(payload).encode("utf-8") + b"\n")
                data = conn.makefile("rb").readline()
        except OSError as exc:
            raise TransportUnreachable(f"{address}: {exc}") from exc
        return json.loads(data.decode("utf-8"))

    def close(self):
        for address in list(self._servers):
            self.release_endpoint(address)


# connectors


class Connector:
    """Protocol-mediation contract: connect, disconnect, provide, consume."""

    def connect(self):
        raise NotImplementedError

    def disconnect(self):
        raise NotImplementedError

    def provide(self, message: dict):
        raise NotImplementedError

    def consume(self) -> Optional[dict]:
        raise NotImplementedError


class LoopbackConnector(Connector):
    """Queue-backed connector; what one side provides the other consumes."""

    def __init__(self):
        self._queue: List[dict] = []
        self._connected = False
        self._lock = threading.Lock()

    def connect(self):
        self._connected = True

    def disconnect(self):
        self._connected = False

    def _check(self):
        if not self._connected:
            raise NotConnected("connector is not connected")

    def provide(self, message: dict):
        self._check()
        with self._lock:
            self._queue.append(json.loads(json.dumps(message)))

    def consume(self) -> Optional[dict]:
        self._check()
        with self._lock:
            return self._queue.pop(0) if self._queue else None


def read_channel_csv(path) -> Tuple[str, str, List[Tuple[float, float]]]:
    """Read one recording file: header line `channel,unit`, then `t,value`
    rows with strictly increasing t."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ReplayFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if len(header) != 2:
        raise ReplayFormatError(f"{path}: header must be 'channel,unit'")
    channel, unit = header[0].strip(), header[1].strip()
    samples: List[Tuple[float, float]] = []
    previous = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ReplayFormatError(f"{path}:{lineno}: expected 't_seconds,value'")
        try:
            t, value = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise ReplayFormatError(f"{path}:{lineno}: {exc}") from exc
        if previous is not None and t <= previous:
            raise ReplayFormatError(f"{path}:{lineno}: timestamps must be strictly increasing")
        previous = t
        samples.append((t, value))
    return channel, unit, samples


class ReplayConnector(Connector):
    """Serves recorded time-series messages from per-channel CSV files, merged
    in time order. This is the stand-in for the industrial protocol stack."""

    def __init__(self, paths: Sequence):
        self.paths = [Path(p) for p in paths]
        self._messages: List[dict] = []
        self._cursor = 0
        self._connected = False
        self.outbox: List[dict] = []

    def connect(self):
        messages = []
        for path in self.paths:
            channel, unit, samples = read_channel_csv(path)
            for t, value in samples:
                messages.append({"channel": channel, "unit": unit, "t": t, "value": value})
        messages.sort(key=lambda m: (m["t"], m["channel"]))
        self._messages = messages
        self._cursor = 0
        self._connected = True

    def disconnect(self):
        self._connected = False

    def provide(self, message: dict):
        if not self._connected:
            raise NotConnected("connector is not connected")
        self.outbox.append(message)

    def consume(self) -> Optional[dict]:
        if not self._connected:
            raise NotConnected("connector is not connected")
        if self._cursor >= len(self._messages):
            return None
        message = self._messages[self._cursor]
        self._cursor += 1
        return message


# argument handling

_JSON_TYPES = {
    XSD_STRING: str,
    XSD_ANYURI: str,
    XSD_INTEGER: int,
    XSD_DOUBLE: float,
    XSD_BOOLEAN: bool,
}


def check_arguments(descriptor: WorkflowDescriptor, args: dict) -> Optional[str]:
    expected = {name for name, _ in descriptor.parameters}
    got = set(args)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        return f"argument mismatch: missing {missing}, unexpected {extra}"
    for name, datatype in descriptor.parameters:
        expected_type = _JSON_TYPES.get(datatype, str)
        value = args[name]
        if expected_type is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected_type) or (
            expected_type in (int, float) and isinstance(value, bool)
        ):
            return f"argument {name!r} must be {expected_type.__name__}"
    return None


class Middleware:
    """Wraps one service: graph registration, dispatch, and peer invocation."""

    def __init__(self, transport: Transport, ogm: Ogm):
        self.transport = transport
        self.ogm = ogm
        self.address: Optional[str] = None
        self.descriptor: Optional[ServiceDescriptor] = None
        self._handlers: Dict[str, Callable] = {}
        self._workflows: Dict[str, WorkflowDescriptor] = {}
        self._dispatch_lock = threading.Lock()

    # registration lifecycle

    def register_service(
        self,
        descriptor: ServiceDescriptor,
        handlers: Optional[Dict[Term, Callable]] = None,
    ) -> int:
        """Instantiate (or re-activate) the service and workflow individuals,
        publish the endpoint address, and bind workflow handlers."""
        self.address = self.transport.register_endpoint(self._dispatch)
        descriptor.address = self.address
        self.descriptor = descriptor
        handlers = handlers or {}

        to_commit = []
        service_obj = self._materialize(descriptor.service_iri, descriptor.service_class)
        service_obj.set(srv("hasAddress"), self.address)
        if descriptor.provided_by is not None:
            service_obj.set(srv("providedByResource"), descriptor.provided_by)
        workflow_terms = []
        for wf in descriptor.workflows:
            wf_obj = self._materialize(wf.workflow_iri, wf.workflow_class)
            wf_obj.set(
                srv("hasParameterSignature"),
                json.dumps([[n, d] for n, d in wf.parameters]),
            )
            wf_obj.set(srv("hasOutcomeSignature"), json.dumps(list(wf.outcome)))
            to_commit.append(wf_obj)
            workflow_terms.append(wf.workflow_iri)
            self._workflows[wf.workflow_iri.value] = wf
            if wf.workflow_iri in handlers:
                self._handlers[wf.workflow_iri.value] = handlers[wf.workflow_iri]
        service_obj.set(srv("providesWorkflow"), workflow_terms)
        to_commit.append(service_obj)
        return self.ogm.commit(to_commit)

    def _materialize(self, iri_: Term, class_iri: Term):
        if self.ogm.store.match(iri_, iri(RDF_TYPE), None, None):
            return self.ogm.fetch(iri_, class_iri)
        return self.ogm.create(class_iri, iri_)

    def bind(self, workflow_iri: Term, handler: Callable):
        self._handlers[workflow_iri.value] = handler

    def deregister_service(self) -> int:
        """Retract the address so nothing is invokeable; individuals persist."""
        if self.descriptor is None:
            raise UnknownService("no service registered on this middleware")
        service_obj = self.ogm.fetch(self.descriptor.service_iri, self.descriptor.service_class)
        service_obj.set(srv("hasAddress"), [])
        txn = self.ogm.commit(service_obj)
        if self.address is not None:
            self.transport.release_endpoint(self.address)
            self.address = None
        return txn

    # invocation

    def _dispatch(self, payload: dict) -> dict:
        with self._dispatch_lock:
            workflow = payload.get("workflow")
            args = payload.get("args", {})
            descriptor = self._workflows.get(workflow)
            handler = self._handlers.get(workflow)
            if descriptor is None or handler is None:
                return _fault_payload("argument-mismatch", f"unknown workflow {workflow}")
            problem = check_arguments(descriptor, args)
            if problem is not None:
                return _fault_payload("argument-mismatch", problem)
            try:
                outcome = handler(**args)
            except CommitRejected as exc:
                return _fault_payload(
                    "commit-rejected",
                    "commit rejected by admission gate",
                    report=shacl.serialize_report(exc.report, PREFIXES),
                )
            except Exception as exc:
                return _fault_payload("handler-error", str(exc))
            return {"ok": True, "outcome": outcome}

    def invoke(self, workflow_iri: Term, address: str, args: dict) -> InvocationResult:
        payload = {"workflow": workflow_iri.value, "args": args}
        try:
            response = self.transport.request(address, payload)
        except TransportUnreachable as exc:
            return InvocationResult(ok=False, fault=Fault("transport-unreachable", str(exc)))
        if response.get("ok"):
            return InvocationResult(ok=True, outcome=response.get("outcome"))
        fault = response.get("fault", {})
        report = None
        if fault.get("report"):
            report = shacl.parse_report(fault["report"])
        return InvocationResult(
            ok=False,
            fault=Fault(fault.get("kind", "handler-error"), fault.get("detail", ""), report),
        )


def _fault_payload(kind: str, detail: str, report: Optional[str] = None) -> dict:
    fault = {"kind": kind, "detail": detail}
    if report is not None:
        fault["report"] = report
    return {"ok": False, "fault": fault}


def discover(workflow_class: Term, view: StoreSnapshot) -> List[Tuple[Term, str]]:
    """All workflows of the class (including subclasses) whose hosting service
    is currently online, in deterministic IRI order."""
    closure = shacl.subclass_closure(view).get(workflow_class, {workflow_class})
    hits: Dict[Term, str] = {}
    for cls in closure:
        query = sparql.parse_query_cached(
            f"PREFIX srv: <{SRV}>\n"
            f"SELECT ?w ?addr WHERE {{ ?w rdf:type <{cls.value}> . "
            f"?s srv:providesWorkflow ?w . ?s srv:hasAddress ?addr }}"
        )
        for row in sparql.evaluate(query, view):
            hits[row["w"]] = row["addr"].value
    return sorted(hits.items(), key=lambda pair: pair[0].value)


def workflows_of_resource(
    workflow_class: Term, resource: Term, view: StoreSnapshot
) -> List[Tuple[Term, str]]:
    """Discovery narrowed to workflows whose service runs on one resource."""
    closure = shacl.subclass_closure(view).get(workflow_class, {workflow_class})
    hits: Dict[Term, str] = {}
    for cls in closure:
        query = sparql.parse_query_cached(
            f"PREFIX srv: <{SRV}>\n"
            f"SELECT ?w ?addr WHERE {{ ?w rdf:type <{cls.value}> . "
            f"?s srv:providesWorkflow ?w . ?s srv:hasAddress ?addr . "
            f"?s srv:providedByResource <{resource.value}> }}"
        )
        for row in sparql.evaluate(query, view):
            hits[row["w"]] = row["addr"].value
    return sorted(hits.items(), key=lambda pair: pair[0].value)
