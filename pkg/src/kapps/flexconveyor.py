"""Decentralized conveyor demonstrator: autonomous module agents move boxes
through the constraint-gated graph.

Coordination is a three-step handshake. The sender asks the next hop for a
reservation; once granted it runs its own Convey workflow, which moves the
possession relation in one transaction; the receiver acknowledges through its
Receive workflow and, when it is the destination, retires the box in one
transaction (possession retracted, state Delivered). Fault injection
deliberately skips the reservation step or delivers without retracting
possession; the admission gate rejects the resulting states and the agent
falls back to the correct protocol after parsing the returned report.

All shared state lives in the graph. Agents keep only their reservation table,
backoff counters, and fault flags; peer addresses always come from discovery.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .middleware import (
    Fault,
    LoopbackTransport,
    Middleware,
    ServiceDescriptor,
    Transport,
    WorkflowDescriptor,
    workflows_of_resource,
)
from .ogm import CommitRejected, Ogm
from .runtime import Runtime
from .store import TransactionRejected
from .terms import XSD_ANYURI, XSD_BOOLEAN, Term, iri
from .vocab import fc, fci, srv

DIRECTIONS = ("N", "E", "S", "W")
_OFFSETS = {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}

RESERVATION_TTL_TICKS = 5


@dataclass
class Topology:
    width: int
    height: int
    modules: List[Term]
    adjacency: Dict[Term, Dict[str, Term]]

    def coords(self, module: Term) -> Tuple[int, int]:
        index = self.modules.index(module)
        return index % self.width, index // self.width

    def distance_map(self, target: Term) -> Dict[Term, int]:
        distances = {target: 0}
        frontier = [target]
        while frontier:
            nxt = []
            for module in frontier:
                for neighbor in self.adjacency[module].values():
                    if neighbor not in distances:
                        distances[neighbor] = distances[module] + 1
                        nxt.append(neighbor)
            frontier = nxt
        return distances


def next_hop(
    module: Term,
    destination: Term,
    topology: Topology,
    exclude: Optional[set] = None,
) -> str:
    """Direction along a shortest grid path; ties break in N,E,S,W order.
    With exclusions the best remaining direction is taken even if longer;
    if everything is excluded the exclusions are dropped (dead-end corridor)."""
    distances = topology.distance_map(destination)
    exclude = exclude or set()
    best_dir = None
    best_dist = None
    for direction in DIRECTIONS:
        if direction in exclude:
            continue
        neighbor = topology.adjacency[module].get(direction)
        if neighbor is None:
            continue
        dist = distances[neighbor]
        if best_dist is None or dist < best_dist:
            best_dir, best_dist = direction, dist
    if best_dir is None:
        return next_hop(module, destination, topology, exclude=None)
    return best_dir


@dataclass
class FaultConfig:
    mode: str = "none"  # none | skip-reservation | deliver-while-possessed
    probability: float = 1.0
    seed: int = 0


@dataclass
class RejectionEvent:
    attempt_txn: int
    component: str
    focus_node: str
    report: object = field(default=None, repr=False, compare=False)


@dataclass
class SimReport:
    delivered_count: int
    rejection_events: List[RejectionEvent]
    per_box_path: Dict[str, List[str]]
    tick_count: int
    box_count: int
    runtime: Optional[Runtime] = field(default=None, repr=False)
    environment: Optional["SimEnvironment"] = field(default=None, repr=False)

    def summary(self) -> str:
        lines = [
            f"delivered {self.delivered_count}/{self.box_count} boxes in {self.tick_count} ticks",
            f"rejections: {len(self.rejection_events)}",
        ]
        for event in self.rejection_events:
            lines.append(
                f"  txn>{event.attempt_txn} {event.component.rsplit('#', 1)[-1]} at "
                f"{event.focus_node}"
            )
        for box, path in sorted(self.per_box_path.items()):
            hops = " -> ".join(p.rsplit("#", 1)[-1] for p in path)
            lines.append(f"  {box.rsplit('#', 1)[-1]}: {hops}")
        return "\n".join(lines)


class SimRecorder:
    """Shared, lock-guarded run bookkeeping (events, paths, delivery marks)."""

    def __init__(self):
        self.rejections: List[RejectionEvent] = []
        self.paths: Dict[str, List[str]] = {}
        self.delivered: set = set()
        self._state_counters: Dict[str, int] = {}
        self._lock = threading.Lock()

    def record_rejection(self, attempt_txn: int, report):
        with self._lock:
            for result in report.results:
                self.rejections.append(
                    RejectionEvent(attempt_txn, result.component, result.focus_node.value, report)
                )

    def start_path(self, box: Term, origin: Term):
        with self._lock:
            self.paths[box.value] = [origin.value]

    def extend_path(self, box: Term, module: Term):
        with self._lock:
            self.paths.setdefault(box.value, []).append(module.value)

    def mark_delivered(self, box: Term):
        with self._lock:
            self.delivered.add(box.value)

    def previous_module(self, box: Term) -> Optional[str]:
        with self._lock:
            path = self.paths.get(box.value, [])
            return path[-2] if len(path) >= 2 else None

    def next_state_iri(self, box: Term) -> Term:
        with self._lock:
            n = self._state_counters.get(box.value, 0) + 1
            self._state_counters[box.value] = n
        local = box.value.rsplit("#", 1)[-1]
        return fci(f"{local}_state{n}")


@dataclass
class Reservation:
    box: str
    granted_tick: int


class ModuleAgent:
    """Control logic of one conveyor module, wrapped by its own middleware."""

    def __init__(
        self,
        index: int,
        module: Term,
        topology: Topology,
        runtime: Runtime,
        transport: Transport,
        recorder: SimRecorder,
        fault: FaultConfig,
    ):
        self.module = module
        self.topology = topology
        self.runtime = runtime
        self.recorder = recorder
        self.fault = fault
        self.rng = random.Random(fault.seed * 10007 + index)
        self.fault_armed = fault.mode != "none"
        self.ogm = runtime.ogm(actor=_service_iri(module))
        self.middleware = Middleware(transport, self.ogm)
        self.reservation: Optional[Reservation] = None
        self.backoff_until = 0
        self.exclude_direction: Optional[str] = None
        self.denial_streak = 0
        self.now = 0
        self.reserve_wf = _workflow_iri(module, "Reserve")
        self.convey_wf = _workflow_iri(module, "Convey")
        self.receive_wf = _workflow_iri(module, "Receive")

    # registration

    def register(self) -> int:
        local = self.module.value.rsplit("#", 1)[-1]
        descriptor = ServiceDescriptor(
            service_iri=_service_iri(self.module),
            service_class=srv("Service"),
            provided_by=self.module,
            workflows=[
                WorkflowDescriptor(
                    self.reserve_wf,
                    fc("ReserveWorkflow"),
                    parameters=[("box", XSD_ANYURI), ("sender", XSD_ANYURI)],
                    outcome=("granted", XSD_BOOLEAN),
                ),
                WorkflowDescriptor(
                    self.convey_wf,
                    fc("ConveyWorkflow"),
                    parameters=[("box", XSD_ANYURI), ("receiver", XSD_ANYURI)],
                    outcome=("conveyed", XSD_BOOLEAN),
                ),
                WorkflowDescriptor(
                    self.receive_wf,
                    fc("ReceiveWorkflow"),
                    parameters=[("box", XSD_ANYURI), ("arrived", XSD_BOOLEAN)],
                    outcome=("delivered", XSD_BOOLEAN),
                ),
            ],
        )
        return self.middleware.register_service(
            descriptor,
            handlers={
                self.reserve_wf: self.handle_reserve,
                self.convey_wf: self.handle_convey,
                self.receive_wf: self.handle_receive,
            },
        )

    # graph helpers

    def _possessed_boxes(self) -> List[Term]:
        return sorted(
            (q.object for q in self.runtime.store.match(self.module, fc("hasPossession"), None)),
            key=lambda t: t.value,
        )

    def _destination_of(self, box: Term) -> Term:
        quads = self.runtime.store.match(box, fc("hasDestination"), None)
        return quads[0].object

    def _fault_fires(self) -> bool:
        if not self.fault_armed:
            return False
        if self.fault.probability >= 1.0:
            return True
        return self.rng.random() < self.fault.probability

    def _note_rejection(self, report):
        self.recorder.record_rejection(self.runtime.store.head, report)
        self.fault_armed = False  # report parsed: fall back to the protocol

    # workflow handlers

    def handle_reserve(self, box: str, sender: str) -> dict:
        if self.reservation is not None and self.now - self.reservation.granted_tick <= RESERVATION_TTL_TICKS:
            return {"granted": False, "reason": "reserved"}
        if self._possessed_boxes():
            return {"granted": False, "reason": "occupied"}
        self.reservation = Reservation(box=box, granted_tick=self.now)
        return {"granted": True}

    def handle_convey(self, box: str, receiver: str) -> dict:
        box_term = iri(box)
        receiver_term = iri(receiver)
        sender_obj = self.ogm.fetch(self.module, fc("FlexConveyorModule"))
        receiver_obj = self.ogm.fetch(receiver_term, fc("FlexConveyorModule"))
        box_obj = self.ogm.fetch(box_term, fc("Box"))
        sender_obj.set(fc("hasPossession"), [v for v in sender_obj.term_values(fc("hasPossession")) if v != box_term])
        receiver_obj.add(fc("hasPossession"), box_term)
        box_obj.set(fc("isPossessedBy"), [receiver_term])
        try:
            self.ogm.commit([sender_obj, receiver_obj, box_obj])
        except CommitRejected as exc:
            self._note_rejection(exc.report)
            raise
        result = self._invoke_on_resource(receiver_term, fc("ReceiveWorkflow"), {
            "box": box, "arrived": True,
        })
        delivered = bool(result.ok and result.outcome and result.outcome.get("delivered"))
        return {"conveyed": True, "delivered": delivered}

    def handle_receive(self, box: str, arrived: bool) -> dict:
        box_term = iri(box)
        if self.reservation is not None and self.reservation.box == box:
            self.reservation = None
        if arrived:
            self.recorder.extend_path(box_term, self.module)
        destination = self._destination_of(box_term)
        if destination != self.module:
            return {"delivered": False}
        self._deliver(box_term)
        return {"delivered": True}

    def _deliver(self, box_term: Term):
        """One transaction: possession retracted and state set to Delivered.
        The deliver-while-possessed fault keeps the possession relation."""
        faulty = self.fault.mode == "deliver-while-possessed" and self._fault_fires()
        box_obj = self.ogm.fetch(box_term, fc("Box"))
        module_obj = self.ogm.fetch(self.module, fc("FlexConveyorModule"))
        state_obj = self.ogm.create(fc("Delivered"), self.recorder.next_state_iri(box_term))
        box_obj.set(fc("hasState"), [state_obj.iri])
        to_commit = [box_obj, state_obj]
        if not faulty:
            box_obj.set(fc("isPossessedBy"), [])
            module_obj.set(fc("hasPossession"), [])
            to_commit.append(module_obj)
        try:
            self.ogm.commit(to_commit)
        except CommitRejected as exc:
            self._note_rejection(exc.report)
            raise
        self.recorder.mark_delivered(box_term)

    # control loop

    def tick(self, now: int) -> str:
        self.now = now
        if self.backoff_until > now:
            return "backoff"
        boxes = self._possessed_boxes()
        if not boxes:
            return "idle"
        box = boxes[0]
        destination = self._destination_of(box)
        if destination == self.module:
            result = self._invoke_self(self.receive_wf, {"box": box.value, "arrived": False})
            if not result.ok:
                self._handle_fault(result.fault)
                return "deliver-rejected"
            return "delivered"
        direction = self._choose_direction(box, destination)
        receiver = self.topology.adjacency[self.module][direction]
        if self.fault.mode == "skip-reservation" and self._fault_fires():
            result = self._invoke_self(
                self.convey_wf, {"box": box.value, "receiver": receiver.value}
            )
            if not result.ok:
                self.denial_streak += 1
                self._handle_fault(result.fault, denied_direction=direction)
                return "convey-rejected"
            self.denial_streak = 0
            return "conveyed"
        reserve = self._invoke_on_resource(
            receiver, fc("ReserveWorkflow"), {"box": box.value, "sender": self.module.value}
        )
        if not reserve.ok or not reserve.outcome or not reserve.outcome.get("granted"):
            self.denial_streak += 1
            self._backoff(denied_direction=direction)
            return "reserve-denied"
        result = self._invoke_self(self.convey_wf, {"box": box.value, "receiver": receiver.value})
        if not result.ok:
            self.denial_streak += 1
            self._handle_fault(result.fault, denied_direction=direction)
            return "convey-rejected"
        self.denial_streak = 0
        return "conveyed"

    def _choose_direction(self, box: Term, destination: Term) -> str:
        """Shortest-path direction with congestion handling: avoid bouncing
        back when a free alternative exists, honor a one-shot detour exclusion
        after denials, and after three straight failed attempts random-walk to
        any free neighbor to break clinches."""
        adjacency = self.topology.adjacency[self.module]
        occupied = {
            d: bool(self.runtime.store.match(nb, fc("hasPossession"), None))
            for d, nb in adjacency.items()
        }
        exclude = set()
        if self.exclude_direction is not None:
            exclude.add(self.exclude_direction)
            self.exclude_direction = None
        came_from = self.recorder.previous_module(box)
        if came_from is not None:
            for direction, neighbor in adjacency.items():
                if neighbor.value != came_from or neighbor == destination:
                    continue
                if any(not occupied[d] for d in adjacency if d != direction):
                    exclude.add(direction)
        if self.denial_streak >= 3:
            free = sorted(d for d in adjacency if not occupied[d] and d not in exclude)
            if not free:
                free = sorted(d for d in adjacency if not occupied[d])
            if free:
                return self.rng.choice(free)
        return next_hop(self.module, destination, self.topology, exclude)

    def _invoke_self(self, workflow: Term, args: dict):
        return self.middleware.invoke(workflow, self.middleware.address, args)

    def _invoke_on_resource(self, resource: Term, workflow_class: Term, args: dict):
        hits = workflows_of_resource(workflow_class, resource, self.runtime.store.snapshot())
        if not hits:
            return _unreachable(resource)
        workflow_iri, address = hits[0]
        return self.middleware.invoke(workflow_iri, address, args)

    def _handle_fault(self, fault: Optional[Fault], denied_direction: Optional[str] = None):
        self._backoff(denied_direction)

    def _backoff(self, denied_direction: Optional[str] = None):
        self.backoff_until = self.now + self.rng.randint(1, 3)
        # Half the time take a detour next attempt, half the time wait the
        # blocker out; the seeded coin breaks symmetric standoffs.
        if denied_direction is not None and self.rng.random() < 0.5:
            self.exclude_direction = denied_direction


def _unreachable(resource: Term):
    from .middleware import InvocationResult

    return InvocationResult(
        ok=False, fault=Fault("transport-unreachable", f"no online workflow on {resource.value}")
    )


def _service_iri(module: Term) -> Term:
    return fci(module.value.rsplit("#", 1)[-1] + "Service")


def _workflow_iri(module: Term, kind: str) -> Term:
    return fci(module.value.rsplit("#", 1)[-1] + f"_{kind}Workflow")


class Wms:
    """Minimal warehouse management: creates boxes with origin/destination."""

    def __init__(self, runtime: Runtime, recorder: SimRecorder):
        self.runtime = runtime
        self.recorder = recorder
        self.ogm = runtime.ogm(actor=fci("WMS"))
        self._box_counter = 0

    def create_box(self, origin: Term, destination: Term) -> Term:
        """Two transactions: the box is born Created, then atomically enters
        InTransit with possession granted to the origin module."""
        self._box_counter += 1
        box_iri = fci(f"Box{self._box_counter}")
        box = self.ogm.create(fc("Box"), box_iri)
        state1 = self.ogm.create(fc("Created"), self.recorder.next_state_iri(box_iri))
        box.set(fc("hasOrigin"), [origin])
        box.set(fc("hasDestination"), [destination])
        box.set(fc("hasState"), [state1.iri])
        self.ogm.commit([box, state1])

        state2 = self.ogm.create(fc("InTransit"), self.recorder.next_state_iri(box_iri))
        box.set(fc("hasState"), [state2.iri])
        box.set(fc("isPossessedBy"), [origin])
        origin_obj = self.ogm.fetch(origin, fc("FlexConveyorModule"))
        origin_obj.add(fc("hasPossession"), box_iri)
        try:
            self.ogm.commit([box, state2, origin_obj])
        except CommitRejected as exc:
            self.recorder.record_rejection(self.runtime.store.head, exc.report)
            raise
        self.recorder.start_path(box_iri, origin)
        return box_iri


@dataclass
class SimEnvironment:
    runtime: Runtime
    transport: Transport
    topology: Topology
    agents: Dict[Term, ModuleAgent]
    recorder: SimRecorder
    wms: Wms


def build_topology(
    width: int,
    height: int,
    runtime: Runtime,
    transport: Optional[Transport] = None,
    fault: Optional[FaultConfig] = None,
) -> SimEnvironment:
    """Commit a width x height module grid and register every module's
    middleware with its three workflows."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    transport = transport or LoopbackTransport()
    fault = fault or FaultConfig()
    recorder = SimRecorder()

    modules = [fci(f"Module{i + 1}") for i in range(width * height)]
    adjacency: Dict[Term, Dict[str, Term]] = {m: {} for m in modules}
    for index, module in enumerate(modules):
        x, y = index % width, index // width
        for direction, (dx, dy) in _OFFSETS.items():
            nx, ny = x + dx, y + dy
            if 0 <= nx < width and 0 <= ny < height:
                adjacency[module][direction] = modules[ny * width + nx]
    topology = Topology(width, height, modules, adjacency)

    bootstrap_ogm = runtime.ogm(actor=fci("TopologyBootstrap"))
    module_objs = []
    for module in modules:
        obj = bootstrap_ogm.create(fc("FlexConveyorModule"), module)
        obj.set(iri("http://w3id.org/circularfactory/Core#hasName"), module.value.rsplit("#", 1)[-1])
        module_objs.append(obj)
    bootstrap_ogm.commit(module_objs)

    agents = {}
    for index, module in enumerate(modules):
        agent = ModuleAgent(index, module, topology, runtime, transport, recorder, fault)
        agent.register()
        agents[module] = agent

    return SimEnvironment(runtime, transport, topology, agents, recorder, Wms(runtime, recorder))


def plan_boxes(env: SimEnvironment, count: int, seed: int) -> List[Tuple[Term, Term]]:
    """Seeded (origin, destination) plans: distinct origins; when two or more
    boxes fit, the first two form an adjacent swap pair so contention is part
    of every run."""
    modules = env.topology.modules
    if count > len(modules):
        raise ValueError("more boxes than modules")
    rng = random.Random(seed)
    plans: List[Tuple[Term, Term]] = []
    used: List[Term] = []
    if count >= 2 and len(modules) >= 2:
        first = modules[0]
        neighbor = env.topology.adjacency[first].get("E") or env.topology.adjacency[first]["S"]
        plans.append((first, neighbor))
        plans.append((neighbor, first))
        used = [first, neighbor]
    remaining = [m for m in modules if m not in used]
    rng.shuffle(remaining)
    while len(plans) < count:
        origin = remaining.pop()
        others = [m for m in modules if m != origin]
        destination = rng.choice(others)
        plans.append((origin, destination))
    return plans[:count]


def run_simulation(
    env: SimEnvironment,
    plans: Sequence[Tuple[Term, Term]],
    fault: FaultConfig,
    seed: int,
    max_ticks: int,
    trace=None,
) -> SimReport:
    """Cooperative round-robin run until all boxes are Delivered or the tick
    budget is exhausted. Deterministic for a fixed (plans, fault, seed)."""
    boxes = []
    for origin, destination in plans:
        boxes.append(env.wms.create_box(origin, destination))
    rng = random.Random(seed)
    order = list(env.topology.modules)
    rng.shuffle(order)

    ticks = 0
    for tick in range(1, max_ticks + 1):
        ticks = tick
        for module in order:
            action = env.agents[module].tick(tick)
            if trace is not None and action not in ("idle", "backoff"):
                trace(f"tick {tick}: {module.value.rsplit('#', 1)[-1]} {action}")
        if len(env.recorder.delivered) == len(boxes):
            break
    return SimReport(
        delivered_count=len(env.recorder.delivered),
        rejection_events=list(env.recorder.rejections),
        per_box_path={b: list(p) for b, p in env.recorder.paths.items()},
        tick_count=ticks,
        box_count=len(boxes),
    )


def run_free_running(
    env: SimEnvironment,
    plans: Sequence[Tuple[Term, Term]],
    seed: int,
    max_rounds: int = 400,
) -> SimReport:
    """Stress mode: one thread per agent, shared store serializing commits."""
    boxes = [env.wms.create_box(o, d) for o, d in plans]
    stop = threading.Event()

    def loop(agent: ModuleAgent):
        local_tick = 0
        while not stop.is_set():
            local_tick += 1
            try:
                agent.tick(local_tick)
            except Exception:
                pass
            if local_tick >= max_rounds:
                break

    threads = [threading.Thread(target=loop, args=(a,)) for a in env.agents.values()]
    for t in threads:
        t.start()
    for _ in range(max_rounds):
        if len(env.recorder.delivered) == len(boxes):
            break
        threading.Event().wait(0.01)
    stop.set()
    for t in threads:
        t.join()
    return SimReport(
        delivered_count=len(env.recorder.delivered),
        rejection_events=list(env.recorder.rejections),
        per_box_path={b: list(p) for b, p in env.recorder.paths.items()},
        tick_count=max_rounds,
        box_count=len(boxes),
    )


def simulate(
    width: int,
    height: int,
    boxes: int,
    fault_mode: str = "none",
    seed: int = 0,
    max_ticks: Optional[int] = None,
    stage: Optional[str] = None,
    audit: bool = False,
    trace=None,
) -> SimReport:
    """Build a fresh runtime and run one scenario end to end."""
    fault = FaultConfig(mode=fault_mode, seed=seed)
    runtime = Runtime.flexconveyor(audit=audit)
    env = build_topology(width, height, runtime, fault=fault)
    if max_ticks is None:
        max_ticks = 50 * (width + height) * max(boxes, 1)
    if stage == "occupied-target":
        # Criterion staging: the moving box's next hop already holds a box
        # whose own route points back, so the first faulty convey must collide.
        first = env.topology.modules[0]
        neighbor = env.topology.adjacency[first].get("E") or env.topology.adjacency[first]["S"]
        plans = [(first, neighbor)]
        plans += [(neighbor, first)]
        plans += plan_boxes_extra(env, boxes - 1, seed, exclude=[first, neighbor])
    else:
        plans = plan_boxes(env, boxes, seed)
    report = run_simulation(env, plans, fault, seed, max_ticks, trace=trace)
    report.runtime = runtime
    report.environment = env
    return report


def plan_boxes_extra(env, count, seed, exclude):
    if count <= 0:
        return []
    rng = random.Random(seed + 1)
    candidates = [m for m in env.topology.modules if m not in exclude]
    rng.shuffle(candidates)
    plans = []
    for _ in range(count):
        origin = candidates.pop()
        destination = rng.choice([m for m in env.topology.modules if m != origin])
        plans.append((origin, destination))
    return plans
