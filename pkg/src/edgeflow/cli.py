"""``edgeflow`` command line: validate, serve, run, report.

Exit codes: 0 ok, 1 validation errors, 2 usage or configuration errors,
3 a run exceeded its failure budget.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import signal
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    CycleDetected,
    DuplicateFunction,
    EdgeflowError,
    MultipleEntries,
    ScenarioError,
    Unreachable,
    UnknownSuccessor,
)
from .graph import Bundle, BundleError, build_graph, is_bundle, load_bundle, validate_storage_chain
from .metrics import emit_report

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


# -- validate ----------------------------------------------------------------


@dataclass
class Diagnostic:
    path: Path
    line: int | None
    severity: str
    message: str

    def __str__(self) -> str:
        where = f"{self.path}:{self.line}" if self.line else str(self.path)
        return f"{where}: {self.severity}: {self.message}"


def find_bundles(root: Path) -> list[Path]:
    found = [root] if is_bundle(root) else []
    for sub in sorted(p for p in root.rglob("*") if p.is_dir()):
        if is_bundle(sub):
            found.append(sub)
    return found


def _next_line(lines: dict[str, int], t, target: str) -> int | None:
    for i, n in t.nexts:
        if n.function == target:
            for key in ("next_function", f"next_function{i}"):
                if key in lines:
                    return lines[key]
            numbered = sorted((ln, k) for k, ln in lines.items() if k.startswith("next_function"))
            return numbered[0][0] if numbered else None
    return None


def _graph_diagnostics(bundle: Bundle, exc: EdgeflowError) -> list[Diagnostic]:
    by_name = {}
    for path, t, lines in bundle.files:
        by_name.setdefault(t.name, []).append((path, t, lines))
    label = f"{type(exc).__name__}: {exc}"
    if isinstance(exc, UnknownSuccessor):
        path, t, lines = by_name[exc.source][0]
        return [Diagnostic(path, _next_line(lines, t, exc.target), "error", label)]
    if isinstance(exc, CycleDetected):
        src, dst = exc.path[0], exc.path[1] if len(exc.path) > 1 else exc.path[0]
        path, t, lines = by_name[src][0]
        return [Diagnostic(path, _next_line(lines, t, dst), "error", label)]
    if isinstance(exc, DuplicateFunction):
        return [Diagnostic(path, lines.get("name"), "error", label) for path, _, lines in by_name[exc.name][1:]]
    if isinstance(exc, (MultipleEntries, Unreachable)):
        return [Diagnostic(path, lines.get("name"), "error", label)
                for n in exc.names for path, _, lines in by_name[n][:1]]
    return [Diagnostic(bundle.path, None, "error", label)]


def validate_bundle(directory: Path, handler_ids: set[str] | None = None,
                    backends: set[str] | None = None) -> list[Diagnostic]:
    try:
        bundle = load_bundle(directory)
    except BundleError as exc:
        return [Diagnostic(exc.path, exc.line, "error", f"{type(exc.cause).__name__}: {exc.cause}")]
    diags = []
    for path, t, lines in bundle.files:
        if handler_ids is not None and t.handler not in handler_ids:
            diags.append(Diagnostic(path, lines.get("handler"), "error",
                                    f"UnresolvedHandler: no handler registered as {t.handler!r}"))
        if backends is not None:
            for ref in list(t.inputs) + [o.ref for o in t.outputs]:
                if ref.backend not in backends:
                    diags.append(Diagnostic(path, None, "warning",
                                            f"backend {ref.backend!r} is not built in; register it in the scenario"))
    try:
        g = build_graph(bundle.name, bundle.templates)
    except EdgeflowError as exc:
        return diags + _graph_diagnostics(bundle, exc)
    for w in validate_storage_chain(g):
        path, lines = bundle.sources[w.source]
        out_line = next((ln for k, ln in sorted(lines.items()) if k.startswith("output")), None)
        diags.append(Diagnostic(path, out_line, "warning", str(w)))
    return diags


def cmd_validate(args) -> int:
    from .storage import default_registry
    from .workloads import builtin_handlers

    root = Path(args.dir)
    if not root.is_dir():
        print(f"edgeflow: no such directory {root}", file=sys.stderr)
        return EXIT_USAGE
    bundles = find_bundles(root)
    if not bundles:
        print(f"{root}: error: no workflow bundles (*.fn) found")
        return EXIT_INVALID
    handler_ids = set(builtin_handlers().ids())
    backends = set(default_registry().names()) | {"tsdb", "file"}
    errors = warnings = 0
    for b in bundles:
        diags = validate_bundle(b, handler_ids, backends)
        for d in diags:
            print(d)
        e = sum(d.severity == "error" for d in diags)
        w = len(diags) - e
        errors += e
        warnings += w
        print(f"{b}: {'FAILED' if e else 'ok'} ({e} errors, {w} warnings)")
    return EXIT_INVALID if errors else EXIT_OK


# -- run ---------------------------------------------------------------------


def _write_report(report: dict, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(emit_report(report, "json"), encoding="utf-8")
    (out / f"{stem}.csv").write_text(emit_report(report, "csv"), encoding="utf-8")


def cmd_run(args) -> int:
    from .scenario import load_scenario, run_scenario

    if args.repeats < 1:
        print("edgeflow: --repeats must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    base_seed = scenario.seed if args.seed is None else args.seed
    out = Path(args.out)
    code = EXIT_OK
    for i in range(args.repeats):
        seed = base_seed + i
        try:
            report = run_scenario(scenario, real=args.real, seed=seed)
        except ScenarioError as exc:
            print(f"{args.scenario}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        stem = "report" if args.repeats == 1 else f"report-{i + 1}"
        _write_report(report, out, stem)
        wf = report["workflow"]
        ratio = wf["failed"] / wf["requests"] if wf["requests"] else 0.0
        p95 = wf["p95_end_to_end_ms"]
        print(f"{out / stem}.json: seed {seed}, {wf['requests']} requests, {wf['failed']} failed, "
              f"{wf['incomplete']} incomplete, p95 end-to-end "
              f"{'n/a' if p95 is None else f'{p95:.3f} ms'}")
        if ratio > args.failure_budget:
            print(f"failure rate {ratio:.4f} exceeds budget {args.failure_budget}", file=sys.stderr)
            code = EXIT_BUDGET
    return code


# -- report ------------------------------------------------------------------


def _report_files(target: Path) -> list[Path]:
    if target.is_file():
        return [target]
    if (target / "report.json").is_file():
        return [target / "report.json"]
    return sorted(target.glob("report-*.json"), key=lambda p: int(p.stem.split("-")[1]))


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def render_table(report: dict) -> str:
    header = f"{'function':<20} {'tier':<6} {'kind':<8} {'count':>7} {'failed':>6} {'mean_ms':>11} {'p95_ms':>11}"
    rows = [f"scenario {report['scenario']} (time_scale {report['time_scale']})", header, "-" * len(header)]
    for f in report["functions"]:
        rows.append(f"{f['name']:<20} {f['tier']:<6} {f['kind']:<8} {f['count']:>7} {f['failures']:>6} "
                    f"{_fmt(f['mean_ms']):>11} {_fmt(f['p95_ms']):>11}")
    wf = report["workflow"]
    rows.append(f"{'end-to-end':<20} {'':<6} {'request':<8} {wf['complete']:>7} {wf['failed']:>6} "
                f"{_fmt(wf['mean_end_to_end_ms']):>11} {_fmt(wf['p95_end_to_end_ms']):>11}")
    if wf["incomplete"]:
        rows.append(f"{wf['incomplete']} incomplete request trees excluded")
    return "\n".join(rows) + "\n"


def _delta(a, b) -> str:
    if a is None or b is None or a == 0:
        return "n/a"
    return f"{(b - a) / a * 100:+.1f}%"


def render_compare(a: dict, b: dict) -> str:
    rows = [f"{a['scenario']} -> {b['scenario']}",
            f"{'function':<20} {'tier':<13} {'p95_a':>11} {'p95_b':>11} {'delta':>9}"]
    index_b = {(f["name"], f["kind"]): f for f in b["functions"]}
    for f in a["functions"]:
        if f["kind"] != "handler":
            continue
        g = index_b.get((f["name"], "handler"))
        if g is None:
            continue
        tiers = f"{f['tier']}->{g['tier']}"
        rows.append(f"{f['name']:<20} {tiers:<13} {_fmt(f['p95_ms']):>11} {_fmt(g['p95_ms']):>11} "
                    f"{_delta(f['p95_ms'], g['p95_ms']):>9}")
    pa, pb = a["workflow"]["p95_end_to_end_ms"], b["workflow"]["p95_end_to_end_ms"]
    rows.append(f"{'end-to-end':<20} {'':<13} {_fmt(pa):>11} {_fmt(pb):>11} {_delta(pa, pb):>9}")
    return "\n".join(rows) + "\n"


def cmd_report(args) -> int:
    files = _report_files(Path(args.dir))
    if not files:
        print(f"edgeflow: no report in {args.dir}", file=sys.stderr)
        return EXIT_USAGE
    reports = [json.loads(p.read_text(encoding="utf-8")) for p in files]
    if args.compare:
        other = _report_files(Path(args.compare))
        if not other:
            print(f"edgeflow: no report in {args.compare}", file=sys.stderr)
            return EXIT_USAGE
        sys.stdout.write(render_compare(reports[0], json.loads(other[0].read_text(encoding="utf-8"))))
        return EXIT_OK
    for r in reports:
        if args.format == "table":
            sys.stdout.write(render_table(r))
        else:
            sys.stdout.write(emit_report(r, args.format))
    return EXIT_OK


# -- serve -------------------------------------------------------------------


def _listen(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"--listen expects HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    from .clock import RealClock
    from .gateway import GatewayService, HttpInvoker, TierDescriptor
    from .runtime import Runtime
    from .scenario import Scenario, load_scenario, parse_scenario, resolve_path

    try:
        host, port = _listen(args.listen)
        scenario: Scenario = load_scenario(args.config) if args.config else parse_scenario("")
        if args.workflow:
            scenario.workflow_dirs = [resolve_path(w) for arg in args.workflow for w in arg.split(",")]
        graphs = scenario.graphs()
    except (ValueError, ScenarioError) as exc:
        print(f"edgeflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    clock = RealClock()
    speeds = scenario.tier_speeds(graphs)
    tier = TierDescriptor(args.tier, speeds.get(args.tier, 1.0), scenario.urls.get(args.tier),
                          frozenset(n for g in graphs.values() for n, t in g.nodes.items() if t.tier == args.tier))
    invoker = HttpInvoker(scenario.urls, scenario.sync_timeout_ms)
    runtime = Runtime(graphs, scenario.storage(clock), scenario.handlers(), invoker, clock,
                      speeds=speeds, policy=scenario.autoscale, seed=scenario.seed, tiers={args.tier})
    try:
        runtime.validate()
    except EdgeflowError as exc:
        print(f"edgeflow: {exc}", file=sys.stderr)
        return EXIT_USAGE

    async def main() -> int:
        service = GatewayService(tier, runtime)
        try:
            url = await service.start(host, port)
        except EdgeflowError as exc:
            print(f"edgeflow: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"serving tier {tier.name} at {url} ({len(tier.served_functions)} functions)", flush=True)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        scaler = asyncio.ensure_future(runtime.autoscaler())
        await stop.wait()
        scaler.cancel()
        await service.stop()
        await invoker.close()
        return EXIT_OK

    try:
        return clock.run(main())
    finally:
        clock.close()


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeflow", description="Edge workflow benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check workflow bundles")
    p.add_argument("dir")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("serve", help="run one tier's gateway")
    p.add_argument("--tier", required=True)
    p.add_argument("--listen", default="127.0.0.1:8080")
    p.add_argument("--workflow", action="append", help="bundle directory (repeatable, or comma separated)")
    p.add_argument("--config", help="scenario file with tier URLs, speeds, backends, and placement")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", help="run a scenario and write reports")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--real", action="store_true", help="drive live gateways instead of simulating")
    p.add_argument("--failure-budget", type=float, default=0.0,
                   help="largest tolerated fraction of failed requests (default 0)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print a run's report")
    p.add_argument("dir")
    p.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p.add_argument("--compare", metavar="DIR2")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
