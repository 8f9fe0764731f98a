"""Replay-driven unscrewing loop: perception, threshold classification, and
parameter learning, closed entirely through the knowledge graph.

Raw samples never enter the graph. Recordings live in an append-only keyed
file store under `urn:kapps:ts:<id>` URIs; operation individuals carry three
TimeSeriesData links whose payload properties hold those URIs. The detection
service fetches the screw type's threshold parameters fresh at the start of
every cycle, so a learning commit is picked up on the next classification
without any coordination beyond the graph itself.

The classification rule table and the percentile-based estimator are fixed
here so runs are reproducible; both sit behind small entry points and can be
swapped wholesale.
"""

from __future__ import annotations

import math
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import sparql
from .middleware import ReplayConnector, ReplayFormatError, read_channel_csv
from .ogm import GraphObject, ObjectRef, Ogm, ScopeSpec
from .runtime import Runtime
from .store import StoreSnapshot
from .terms import XSD_ANYURI, Term, iri, literal
from .vocab import UC, uc, uci

TORQUE_CHANNEL = "torque_My"
FORCE_CHANNEL = "force_Fy"
POSITION_CHANNEL = "position_Py"
CHANNEL_UNITS = {TORQUE_CHANNEL: "N.m", FORCE_CHANNEL: "N", POSITION_CHANNEL: "mm"}
CHANNELS = (TORQUE_CHANNEL, FORCE_CHANNEL, POSITION_CHANNEL)

LABELS = ("success", "missing_screw", "occluded_or_rounded_head", "loose_anchor", "stuck_screw")

PARAM_PROPERTIES = {
    "m_lower_nm": uc("torqueLowerLimitNm"),
    "m_upper_nm": uc("torqueUpperLimitNm"),
    "f_max_n": uc("forceMaxLimitN"),
    "p_travel_min_mm": uc("travelMinMm"),
    "p_travel_max_mm": uc("travelMaxMm"),
}

INITIAL_PARAMETERS = {
    "m_lower_nm": 0.1,
    "m_upper_nm": 10.0,
    "f_max_n": 50.0,
    "p_travel_min_mm": 1.0,
    "p_travel_max_mm": 30.0,
}


class UnscrewError(Exception):
    pass


class InsufficientData(UnscrewError):
    pass


@dataclass
class TimeSeriesRecord:
    uri: str
    channel: str
    unit: str
    samples: List[Tuple[float, float]]


class TimeSeriesStore:
    """Append-only keyed blob store for recordings; URIs `urn:kapps:ts:<id>`.
    The file bytes are preserved verbatim so re-reads are exact."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._counter = len(list(self.root.glob("ts_*.csv")))

    def put_file(self, path: Path) -> str:
        channel, unit, samples = read_channel_csv(path)  # validates the format
        if not samples:
            raise ReplayFormatError(f"{path}: recording has no samples")
        self._counter += 1
        key = f"ts_{self._counter}"
        shutil.copyfile(path, self.root / f"{key}.csv")
        return f"urn:kapps:ts:{key}"

    def _path(self, uri: str) -> Path:
        if not uri.startswith("urn:kapps:ts:"):
            raise UnscrewError(f"not a time-series URI: {uri}")
        return self.root / (uri.rsplit(":", 1)[-1] + ".csv")

    def get(self, uri: str) -> TimeSeriesRecord:
        channel, unit, samples = read_channel_csv(self._path(uri))
        return TimeSeriesRecord(uri, channel, unit, samples)

    def read_bytes(self, uri: str) -> bytes:
        return self._path(uri).read_bytes()


def ingest_recording(paths: Dict[str, Path], ts_store: TimeSeriesStore) -> Dict[str, str]:
    """Pull one recording (three channel files) through the replay connector
    into the external store; returns channel -> record URI."""
    missing = set(CHANNELS) - set(paths)
    if missing:
        raise UnscrewError(f"recording is missing channels: {sorted(missing)}")
    connector = ReplayConnector([paths[c] for c in CHANNELS])
    connector.connect()
    try:
        seen = set()
        while True:
            message = connector.consume()
            if message is None:
                break
            seen.add(message["channel"])
        if seen != set(CHANNELS):
            raise UnscrewError(f"recording channels {sorted(seen)} != {sorted(CHANNELS)}")
    finally:
        connector.disconnect()
    return {channel: ts_store.put_file(paths[channel]) for channel in CHANNELS}


@dataclass
class DetectionParameters:
    m_lower_nm: float
    m_upper_nm: float
    f_max_n: float
    p_travel_min_mm: float
    p_travel_max_mm: float

    def check(self):
        if not self.m_lower_nm < self.m_upper_nm:
            raise UnscrewError("torque limits must satisfy lower < upper")
        if not self.p_travel_min_mm < self.p_travel_max_mm:
            raise UnscrewError("travel limits must satisfy min < max")
        if not self.f_max_n > 0:
            raise UnscrewError("force limit must be positive")

    def as_dict(self) -> Dict[str, float]:
        return {
            "m_lower_nm": self.m_lower_nm,
            "m_upper_nm": self.m_upper_nm,
            "f_max_n": self.f_max_n,
            "p_travel_min_mm": self.p_travel_min_mm,
            "p_travel_max_mm": self.p_travel_max_mm,
        }


@dataclass
class TraceFeatures:
    m_peak: float
    f_peak: float
    travel: float


def trace_features(records: Dict[str, TimeSeriesRecord]) -> TraceFeatures:
    torque = [v for _, v in records[TORQUE_CHANNEL].samples]
    force = [v for _, v in records[FORCE_CHANNEL].samples]
    position = [v for _, v in records[POSITION_CHANNEL].samples]
    return TraceFeatures(
        m_peak=max(torque),
        f_peak=max(force),
        travel=max(position) - min(position),
    )


def classify_features(features: TraceFeatures, params: DetectionParameters) -> str:
    """First-match rule table over the three stream features."""
    if features.m_peak < params.m_lower_nm and features.travel < params.p_travel_min_mm:
        return "missing_screw"
    if features.m_peak < params.m_lower_nm and features.travel >= params.p_travel_min_mm:
        return "loose_anchor"
    if features.m_peak >= params.m_upper_nm:
        return "stuck_screw"
    if features.f_peak > params.f_max_n and features.m_peak < params.m_lower_nm:
        return "occluded_or_rounded_head"
    if (
        params.m_lower_nm <= features.m_peak < params.m_upper_nm
        and params.p_travel_min_mm <= features.travel <= params.p_travel_max_mm
    ):
        return "success"
    return "stuck_screw"  # conservative default for anything unmatched


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile over the sorted values."""
    if not values:
        raise InsufficientData("percentile of empty sequence")
    ordered = sorted(values)
    if len(ordered) == 1:
        return ordered[0]
    position = (len(ordered) - 1) * q / 100.0
    lower = math.floor(position)
    upper = min(lower + 1, len(ordered) - 1)
    fraction = position - lower
    return ordered[lower] + fraction * (ordered[upper] - ordered[lower])


def estimate_parameters(features: Sequence[TraceFeatures]) -> DetectionParameters:
    """Percentile-band estimator over success-labeled operations."""
    m_peaks = [f.m_peak for f in features]
    f_peaks = [f.f_peak for f in features]
    travels = [f.travel for f in features]
    params = DetectionParameters(
        m_lower_nm=0.8 * percentile(m_peaks, 5),
        m_upper_nm=1.2 * percentile(m_peaks, 95),
        f_max_n=1.2 * percentile(f_peaks, 95),
        p_travel_min_mm=0.8 * percentile(travels, 5),
        p_travel_max_mm=1.2 * percentile(travels, 95),
    )
    params.check()
    return params


# graph-facing services


def bootstrap_instances(ogm: Ogm, screw_type: Term, resource: Term) -> None:
    """Create the screw type (with the seeded initial parameters) and the
    screwing resource if they are not in the graph yet."""
    if not ogm.store.match(screw_type, None, None, None):
        type_obj = ogm.create(uc("ScrewType"), screw_type)
        for name, prop in PARAM_PROPERTIES.items():
            type_obj.set(prop, INITIAL_PARAMETERS[name])
        ogm.commit(type_obj)
    if not ogm.store.match(resource, None, None, None):
        ogm.commit(ogm.create(uc("ScrewingResource"), resource))


def read_parameters(ogm: Ogm, screw_type: Term, view: Optional[StoreSnapshot] = None) -> DetectionParameters:
    obj = ogm.fetch(screw_type, uc("ScrewType"), ScopeSpec(depth=0), view)
    values = {}
    for name, prop in PARAM_PROPERTIES.items():
        value = obj.get_one(prop)
        if value is None:
            raise UnscrewError(f"{screw_type.value} is missing parameter {prop.value}")
        values[name] = value.python_value()
    return DetectionParameters(**values)


class PerceptionService:
    """Ingests recordings and persists operation individuals with URI links."""

    def __init__(self, ogm: Ogm, ts_store: TimeSeriesStore):
        self.ogm = ogm
        self.ts_store = ts_store
        self._seq = 0

    def create_operation(
        self, screw: Term, resource: Term, record_uris: Dict[str, str]
    ) -> Term:
        self._seq += 1
        op_iri = uci(f"UnscrewOp_{self._seq}")
        op = self.ogm.create(uc("UnscrewingOperation"), op_iri)
        op.set(uc("hasScrew"), [screw])
        op.set(uc("hasResource"), [resource])
        tsd_objs = []
        for channel in CHANNELS:
            tsd_iri = uci(f"UnscrewOp_{self._seq}_{channel}")
            tsd = self.ogm.create(uc("TimeSeriesData"), tsd_iri)
            tsd.set(uc("hasChannelName"), channel)
            tsd.set(uc("hasUnit"), CHANNEL_UNITS[channel])
            tsd.set(uc("hasJSONEncodedTimeSeriesData"), iri_value(record_uris[channel]))
            tsd_objs.append(tsd)
            op.add(uc("hasTimeSeriesData"), tsd_iri)
        screw_obj = self.ogm.fetch(screw, uc("Screw"))
        screw_obj.add(uc("hasOperation"), op_iri)
        type_ref = screw_obj.get_one(uc("hasScrewType"))
        to_commit = [op] + tsd_objs + [screw_obj]
        if type_ref is not None:
            type_obj = self.ogm.fetch(_ref_iri(type_ref), uc("ScrewType"))
            type_obj.add(uc("hasOperation"), op_iri)
            to_commit.append(type_obj)
        self.ogm.commit(to_commit)
        return op_iri

    def new_screw(self, screw_type: Term) -> Term:
        count = len(self.ogm.store.match(None, uc("hasScrewType"), screw_type))
        screw_iri = uci(f"Screw_{count + 1}")
        screw = self.ogm.create(uc("Screw"), screw_iri)
        screw.set(uc("hasScrewType"), [screw_type])
        self.ogm.commit(screw)
        return screw_iri


def iri_value(uri: str) -> Term:
    return literal(uri, XSD_ANYURI)


def _ref_iri(value) -> Term:
    if isinstance(value, ObjectRef):
        return value.iri
    if isinstance(value, GraphObject):
        return value.iri
    return value


@dataclass
class OperationOutcome:
    label: str
    success_status: bool


class AnomalyDetectionService:
    """Sequential decision logic over the three streams; thresholds fetched
    fresh from the graph each call."""

    def __init__(self, ogm: Ogm, ts_store: TimeSeriesStore):
        self.ogm = ogm
        self.ts_store = ts_store

    def classify(self, op_iri: Term) -> OperationOutcome:
        op = self.ogm.fetch(op_iri, uc("UnscrewingOperation"), ScopeSpec(depth=0))
        screw_ref = op.get_one(uc("hasScrew"))
        if screw_ref is None:
            raise UnscrewError(f"{op_iri.value} has no screw link")
        screw = self.ogm.fetch(_ref_iri(screw_ref), uc("Screw"))
        type_ref = screw.get_one(uc("hasScrewType"))
        if type_ref is None:
            raise UnscrewError(f"{screw.iri.value} has no screw type")
        params = read_parameters(self.ogm, _ref_iri(type_ref))
        records = load_operation_records(self.ogm, op_iri, self.ts_store)
        label = classify_features(trace_features(records), params)
        outcome = OperationOutcome(label=label, success_status=label == "success")
        op.set(uc("hasSuccessStatus"), outcome.success_status)
        op.set(uc("hasAnomalyLabel"), outcome.label)
        self.ogm.commit(op)
        return outcome


def load_operation_records(
    ogm: Ogm, op_iri: Term, ts_store: TimeSeriesStore, view: Optional[StoreSnapshot] = None
) -> Dict[str, TimeSeriesRecord]:
    op = ogm.fetch(op_iri, uc("UnscrewingOperation"), ScopeSpec(depth=0), view)
    refs = op.get(uc("hasTimeSeriesData"))
    if len(refs) != 3:
        raise UnscrewError(f"{op_iri.value} carries {len(refs)} records, expected 3")
    records = {}
    for ref in refs:
        tsd = ogm.expand(ref, uc("TimeSeriesData"), view=view) if isinstance(ref, ObjectRef) else ref
        uri = tsd.get_one(uc("hasJSONEncodedTimeSeriesData"))
        record = ts_store.get(uri.python_value())
        records[record.channel] = record
    if set(records) != set(CHANNELS):
        raise UnscrewError(f"{op_iri.value}: unexpected channel set {sorted(records)}")
    return records


class LearningService:
    """Re-estimates the detection parameters from accumulated successes and
    commits them back to the type instance in one transaction."""

    def __init__(self, ogm: Ogm, ts_store: TimeSeriesStore, n_min: int = 10):
        self.ogm = ogm
        self.ts_store = ts_store
        self.n_min = n_min

    def learn(self, screw_type: Term) -> DetectionParameters:
        type_obj = self.ogm.fetch(screw_type, uc("ScrewType"), ScopeSpec(depth=0))
        op_refs = type_obj.get(uc("hasOperation"))
        features = []
        for ref in op_refs:
            op = self.ogm.expand(ref, uc("UnscrewingOperation")) if isinstance(ref, ObjectRef) else ref
            status = op.get_one(uc("hasSuccessStatus"))
            if status is None or status.python_value() is not True:
                continue
            records = load_operation_records(self.ogm, op.iri, self.ts_store)
            features.append(trace_features(records))
        if len(features) < self.n_min:
            raise InsufficientData(
                f"{len(features)} completed successes, need at least {self.n_min}"
            )
        params = estimate_parameters(features)
        for name, prop in PARAM_PROPERTIES.items():
            type_obj.set(prop, getattr(params, name))
        self.ogm.commit(type_obj)
        return params


# closed loop


@dataclass
class CycleRecord:
    cycle: int
    operation: str
    label: str
    classified_txn: int


@dataclass
class LearnEvent:
    cycle: int
    txn: int
    parameters: Dict[str, float]


@dataclass
class LoopReport:
    cycles: List[CycleRecord] = field(default_factory=list)
    learn_events: List[LearnEvent] = field(default_factory=list)
    initial_parameters: Dict[str, float] = field(default_factory=dict)
    final_parameters: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"cycles: {len(self.cycles)}"]
        for record in self.cycles:
            lines.append(f"  cycle {record.cycle}: {record.operation} -> {record.label}")
        for event in self.learn_events:
            rendered = ", ".join(f"{k}={v:.6g}" for k, v in sorted(event.parameters.items()))
            lines.append(f"  learn@{event.cycle} (txn {event.txn}): {rendered}")
        return "\n".join(lines)


def recording_sets(recordings_dir: Path) -> List[Dict[str, Path]]:
    """Recording triples `rec_<n>_<channel>.csv` found in a directory."""
    recordings_dir = Path(recordings_dir)
    stems: Dict[str, Dict[str, Path]] = {}
    for path in sorted(recordings_dir.glob("rec_*_*.csv")):
        name = path.stem  # rec_<n>_<channel>; the channel contains an underscore
        for channel_name in CHANNELS:
            if name.endswith("_" + channel_name):
                prefix = name[: -(len(channel_name) + 1)]
                stems.setdefault(prefix, {})[channel_name] = path
    complete = [files for _, files in sorted(stems.items()) if set(files) == set(CHANNELS)]
    if not complete:
        raise UnscrewError(f"no complete recording triples under {recordings_dir}")
    return complete


SCREW_TYPE = uci("ScrewType_M5")
RESOURCE = uci("ScrewingResource_1")


@dataclass
class LoopServices:
    runtime: Runtime
    ts_store: TimeSeriesStore
    perception: PerceptionService
    detection: AnomalyDetectionService
    learning: LearningService


def build_loop(runtime: Runtime, ts_root: Path, n_min: int = 10) -> LoopServices:
    ts_store = TimeSeriesStore(ts_root)
    perception = PerceptionService(runtime.ogm(actor=uci("PerceptionService")), ts_store)
    detection = AnomalyDetectionService(runtime.ogm(actor=uci("AnomalyDetectionService")), ts_store)
    learning = LearningService(runtime.ogm(actor=uci("LearningService")), ts_store, n_min=n_min)
    bootstrap_instances(perception.ogm, SCREW_TYPE, RESOURCE)
    return LoopServices(runtime, ts_store, perception, detection, learning)


def run_loop(
    recordings_dir: Path,
    cycles: int,
    learn_every: int,
    seed: int,
    runtime: Optional[Runtime] = None,
    ts_root: Optional[Path] = None,
    n_min: int = 10,
    trace=None,
) -> Tuple[LoopReport, LoopServices]:
    """ingest -> create operation -> classify each cycle; learn every
    `learn_every` cycles. The three services share nothing but the graph."""
    runtime = runtime or Runtime.unscrew()
    ts_root = Path(ts_root) if ts_root else Path(recordings_dir) / "_store"
    services = build_loop(runtime, ts_root, n_min=n_min)
    sets = recording_sets(Path(recordings_dir))
    rng = random.Random(seed)

    report = LoopReport(initial_parameters=dict(INITIAL_PARAMETERS))
    for cycle in range(1, cycles + 1):
        files = sets[rng.randrange(len(sets))]
        uris = ingest_recording(files, services.ts_store)
        screw = services.perception.new_screw(SCREW_TYPE)
        op_iri = services.perception.create_operation(screw, RESOURCE, uris)
        outcome = services.detection.classify(op_iri)
        txn = runtime.store.head
        report.cycles.append(CycleRecord(cycle, op_iri.value, outcome.label, txn))
        if trace is not None:
            trace(f"cycle {cycle}: {op_iri.value.rsplit('#', 1)[-1]} -> {outcome.label}")
        if learn_every > 0 and cycle % learn_every == 0:
            try:
                params = services.learning.learn(SCREW_TYPE)
            except InsufficientData as exc:
                if trace is not None:
                    trace(f"learn@{cycle}: skipped ({exc})")
                continue
            event = LearnEvent(cycle, runtime.store.head, params.as_dict())
            report.learn_events.append(event)
            if trace is not None:
                trace(f"learn@{cycle}: {event.parameters}")
    report.final_parameters = read_parameters(
        services.learning.ogm, SCREW_TYPE
    ).as_dict()
    return report, services


def trace_operation(runtime: Runtime, ts_store: TimeSeriesStore, op_iri: Term) -> Dict[str, object]:
    """Reconstruct one decision from the graph alone: actor resource, record
    URIs, label, and the parameters active when the classification committed."""
    snapshot = runtime.store.snapshot()
    resource_q = sparql.evaluate(
        sparql.parse_query(
            f"PREFIX uc: <{UC}>\nSELECT ?r WHERE {{ <{op_iri.value}> uc:hasResource ?r }}"
        ),
        snapshot,
    )
    uris_q = sparql.evaluate(
        sparql.parse_query(
            f"PREFIX uc: <{UC}>\nSELECT ?u WHERE {{ <{op_iri.value}> uc:hasTimeSeriesData ?t . "
            f"?t uc:hasJSONEncodedTimeSeriesData ?u }}"
        ),
        snapshot,
    )
    label_q = sparql.evaluate(
        sparql.parse_query(
            f"PREFIX uc: <{UC}>\nSELECT ?l WHERE {{ <{op_iri.value}> uc:hasAnomalyLabel ?l }}"
        ),
        snapshot,
    )
    classified_txn = None
    label_prop = uc("hasAnomalyLabel")
    for entry in runtime.store.history():
        if any(q.subject == op_iri and q.predicate == label_prop for q in entry.inserts):
            classified_txn = entry.txn_id
    if classified_txn is None:
        raise UnscrewError(f"{op_iri.value} has no recorded classification")
    at = runtime.store.state_at(classified_txn)
    params_rows = sparql.evaluate(
        sparql.parse_query(
            f"PREFIX uc: <{UC}>\nSELECT ?ml ?mu WHERE {{ ?s uc:hasScrewType ?ty . "
            f"<{op_iri.value}> uc:hasScrew ?s . ?ty uc:torqueLowerLimitNm ?ml . "
            f"?ty uc:torqueUpperLimitNm ?mu }}"
        ),
        at,
    )
    if not params_rows:
        raise UnscrewError("active parameters not reconstructible")
    return {
        "operation": op_iri.value,
        "resource": resource_q[0]["r"].value if resource_q else None,
        "record_uris": sorted(row["u"].python_value() for row in uris_q),
        "label": label_q[0]["l"].value if label_q else None,
        "classified_txn": classified_txn,
        "m_lower_nm_at_classification": params_rows[0]["ml"].python_value(),
        "m_upper_nm_at_classification": params_rows[0]["mu"].python_value(),
    }


# synthetic corpus


def generate_corpus(directory: Path, count: int, seed: int) -> List[str]:
    """Seeded recordings: mostly nominal traces with a sprinkling of each
    fault signature relative to the seeded initial thresholds."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    names = []
    for index in range(count):
        roll = rng.random()
        if roll < 0.70:
            m_peak = rng.uniform(2.0, 8.0)
            travel = rng.uniform(5.0, 20.0)
            f_peak = rng.uniform(10.0, 30.0)
        elif roll < 0.80:
            m_peak = rng.uniform(0.0, 0.05)  # missing screw: no torque, no travel
            travel = rng.uniform(0.0, 0.5)
            f_peak = rng.uniform(0.0, 5.0)
        elif roll < 0.90:
            m_peak = rng.uniform(11.0, 15.0)  # stuck: torque above the band
            travel = rng.uniform(0.5, 3.0)
            f_peak = rng.uniform(20.0, 45.0)
        else:
            m_peak = rng.uniform(0.0, 0.05)  # loose anchor: spins with travel
            travel = rng.uniform(5.0, 15.0)
            f_peak = rng.uniform(5.0, 20.0)
        write_trace(directory, f"rec_{index:03d}", m_peak, f_peak, travel, rng)
        names.append(f"rec_{index:03d}")
    return names


def write_trace(directory: Path, stem: str, m_peak: float, f_peak: float, travel: float, rng):
    steps = 20
    torque = [m_peak * math.sin(math.pi * i / (steps - 1)) for i in range(steps)]
    torque[steps // 2] = m_peak  # pin the exact peak
    force = [f_peak * math.sin(math.pi * i / (steps - 1)) for i in range(steps)]
    force[steps // 2] = f_peak
    position = [travel * i / (steps - 1) for i in range(steps)]
    for channel, values in (
        (TORQUE_CHANNEL, torque),
        (FORCE_CHANNEL, force),
        (POSITION_CHANNEL, position),
    ):
        lines = [f"{channel},{CHANNEL_UNITS[channel]}"]
        for i, value in enumerate(values):
            lines.append(f"{i * 0.1:.1f},{value!r}")
        (directory / f"{stem}_{channel}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
