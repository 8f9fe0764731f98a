"""Command-line entry point: load, query, validate, simulate, replay the
unscrewing loop, and inspect history.

Exit codes: 0 success/conforms, 1 violations found, 2 usage error, 3 runtime
error.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime
from pathlib import Path

from . import shacl, sparql
from .flexconveyor import simulate
from .runtime import Runtime
from .store import QuadStore
from .terms import DEFAULT_GRAPH, ONTOLOGY_GRAPH, SHAPES_GRAPH, Term, iri
from .unscrew import generate_corpus, run_loop, trace_operation
from .vocab import PREFIXES

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_store(args) -> QuadStore:
    store = QuadStore()
    for path in args.ontology or []:
        store.load_graph(_read(path), ONTOLOGY_GRAPH)
    for path in args.shapes or []:
        store.load_graph(_read(path), SHAPES_GRAPH)
    for path in getattr(args, "data", None) or []:
        store.load_graph(_read(path), DEFAULT_GRAPH)
    return store


def _dump_store(store: QuadStore, path: str):
    Path(path).write_text(store.dump_graph(DEFAULT_GRAPH, PREFIXES), encoding="utf-8")


def cmd_validate(args) -> int:
    store = QuadStore()
    for path in args.ontology or []:
        store.load_graph(_read(path), ONTOLOGY_GRAPH)
    for path in args.shapes or []:
        store.load_graph(_read(path), SHAPES_GRAPH)
    store.load_graph(_read(args.data), DEFAULT_GRAPH)
    shapes = shacl.load_shapes(store.snapshot(), SHAPES_GRAPH)
    report = shacl.validate(store.snapshot(), shapes)
    sys.stdout.write(shacl.serialize_report(report, PREFIXES, vendor_compat=args.vendor_compat))
    return EXIT_OK if report.conforms else EXIT_VIOLATIONS


def cmd_query(args) -> int:
    store = _load_store(args)
    text = args.expr if args.expr else _read(args.query_file)
    query = sparql.parse_query(text)
    result = sparql.evaluate(query, store.snapshot())
    if isinstance(result, bool):
        print("true" if result else "false")
        return EXIT_OK
    names = [v.name for v in query.variables()] or sorted({n for row in result for n in row})
    print("\t".join(f"?{n}" for n in names))
    for row in result:
        print("\t".join(row[n].n3() if n in row else "" for n in names))
    return EXIT_OK


def cmd_simulate(args) -> int:
    trace = print if args.verbose else None
    report = simulate(
        width=args.width,
        height=args.height,
        boxes=args.boxes,
        fault_mode=args.fault,
        seed=args.seed,
        max_ticks=args.max_ticks,
        stage=args.stage,
        audit=args.audit,
        trace=trace,
    )
    print(report.summary())
    if args.verbose:
        for event in report.rejection_events[:1]:
            print("--- first rejection report ---")
            sys.stdout.write(shacl.serialize_report(event.report, PREFIXES))
    if args.report:
        Path(args.report).write_text(report.summary() + "\n", encoding="utf-8")
    if args.store_dump:
        _dump_store(report.runtime.store, args.store_dump)
    return EXIT_OK


def _sim_for_history(args):
    report = simulate(
        width=args.width,
        height=args.height,
        boxes=args.boxes,
        fault_mode=args.fault,
        seed=args.seed,
        max_ticks=args.max_ticks,
    )
    return report.runtime


def cmd_history(args) -> int:
    runtime = _sim_for_history(args)
    store = runtime.store
    if args.history_command == "list":
        print("txn\ttimestamp\tactor\tinserts\tdeletes")
        for entry in store.history():
            print(
                f"{entry.txn_id}\t{entry.timestamp.isoformat()}\t{entry.actor.value}"
                f"\t{len(entry.inserts)}\t{len(entry.deletes)}"
            )
        return EXIT_OK
    # history at <txn-or-timestamp>
    when: object
    try:
        when = int(args.at)
    except ValueError:
        when = datetime.fromisoformat(args.at)
    snapshot = store.state_at(when)
    if args.expr:
        query = sparql.parse_query(args.expr)
        result = sparql.evaluate(query, snapshot)
        if isinstance(result, bool):
            print("true" if result else "false")
        else:
            names = [v.name for v in query.variables()]
            print("\t".join(f"?{n}" for n in names))
            for row in result:
                print("\t".join(row[n].n3() if n in row else "" for n in names))
    else:
        from . import turtle

        triples = {(q.subject, q.predicate, q.object) for q in snapshot.match(g=DEFAULT_GRAPH)}
        sys.stdout.write(turtle.serialize(triples, PREFIXES))
    return EXIT_OK


def cmd_uc1(args) -> int:
    if args.uc1_command == "generate":
        names = generate_corpus(Path(args.dir), args.count, args.seed)
        print(f"wrote {len(names)} recordings to {args.dir}")
        return EXIT_OK
    trace = print if args.verbose else None
    report, services = run_loop(
        recordings_dir=Path(args.recordings),
        cycles=args.cycles,
        learn_every=args.learn_every,
        seed=args.seed,
        trace=trace,
    )
    print(report.summary())
    if args.trace_op:
        index = args.trace_op - 1
        if not 0 <= index < len(report.cycles):
            raise ValueError(f"--trace-op {args.trace_op} out of range")
        chain = trace_operation(
            services.runtime, services.ts_store, iri(report.cycles[index].operation)
        )
        print("--- traceability chain ---")
        for key, value in chain.items():
            print(f"{key}: {value}")
    if args.store_dump:
        _dump_store(services.runtime.store, args.store_dump)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kapps",
        description="Ontology-governed knowledge-graph runtime with SHACL-gated writes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="validate a data file against shapes")
    validate.add_argument("data")
    validate.add_argument("--shapes", nargs="+", required=True)
    validate.add_argument("--ontology", nargs="*", default=[])
    validate.add_argument("--vendor-compat", action="store_true")
    validate.set_defaults(fn=cmd_validate)

    query = sub.add_parser("query", help="run a SPARQL subset query over data files")
    query.add_argument("query_file", nargs="?")
    query.add_argument("-e", "--expr", help="inline query text")
    query.add_argument("--data", nargs="*", default=[])
    query.add_argument("--ontology", nargs="*", default=[])
    query.add_argument("--shapes", nargs="*", default=[])
    query.set_defaults(fn=cmd_query)

    sim = sub.add_parser("simulate", help="run the conveyor demonstrator")
    sim.add_argument("--width", type=int, default=3)
    sim.add_argument("--height", type=int, default=3)
    sim.add_argument("--boxes", type=int, default=5)
    sim.add_argument(
        "--fault",
        choices=["none", "skip-reservation", "deliver-while-possessed"],
        default="none",
    )
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--max-ticks", type=int, default=None)
    sim.add_argument("--stage", choices=["occupied-target"], default=None)
    sim.add_argument("--report", help="write the run summary to a file")
    sim.add_argument("--store-dump", help="write the final data graph as Turtle")
    sim.add_argument("--audit", action="store_true", help="re-validate after every commit")
    sim.add_argument("--verbose", action="store_true")
    sim.set_defaults(fn=cmd_simulate)

    history = sub.add_parser("history", help="inspect the change log of a seeded run")
    hist_sub = history.add_subparsers(dest="history_command", required=True)
    for name in ("list", "at"):
        hp = hist_sub.add_parser(name)
        if name == "at":
            hp.add_argument("at", help="transaction id or ISO timestamp")
            hp.add_argument("-e", "--expr", help="query to run against the past state")
        hp.add_argument("--width", type=int, default=3)
        hp.add_argument("--height", type=int, default=3)
        hp.add_argument("--boxes", type=int, default=5)
        hp.add_argument(
            "--fault",
            choices=["none", "skip-reservation", "deliver-while-possessed"],
            default="none",
        )
        hp.add_argument("--seed", type=int, default=0)
        hp.add_argument("--max-ticks", type=int, default=None)
        hp.set_defaults(fn=cmd_history)

    uc1 = sub.add_parser("uc1", help="perception/detection/learning loop")
    uc1_sub = uc1.add_subparsers(dest="uc1_command", required=True)
    gen = uc1_sub.add_parser("generate")
    gen.add_argument("--dir", required=True)
    gen.add_argument("--count", type=int, default=12)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(fn=cmd_uc1)
    run = uc1_sub.add_parser("run")
    run.add_argument("--recordings", required=True)
    run.add_argument("--cycles", type=int, default=30)
    run.add_argument("--learn-every", type=int, default=10)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--trace-op", type=int, help="print the traceability chain of cycle N")
    run.add_argument("--store-dump")
    run.add_argument("--verbose", action="store_true")
    run.set_defaults(fn=cmd_uc1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except BrokenPipeError:
        return EXIT_OK
    except Exception as exc:  # surfaced with a stable exit code
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
