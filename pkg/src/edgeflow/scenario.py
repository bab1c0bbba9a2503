"""Scenario files: what to deploy where, how to load it, and for how long.

A scenario uses the same flat ``key: value`` syntax as templates::

    scenario: video-three-tiers
    workflow_dir: .
    mode: closed
    concurrency: 10
    duration: 30m
    time_scale: 1/60
    preset: three tiers
    delay.iot.edge: 2ms

Durations of a minute or more are multiplied by ``time_scale`` (the
``EDGEFLOW_TIME_SCALE`` environment variable overrides the file).
Second-level values are left alone; scaling a 3 s cron period by 1/60
would fall below the 1 s cron floor.
"""

from __future__ import annotations

import asyncio
import dataclasses
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

from .clock import RealClock, SimClock
from .errors import EdgeflowError, ScenarioError, TemplateError
from .gateway import DEFAULT_SPEEDS, DEFAULT_SYNC_TIMEOUT_MS, DelayMatrix, HttpInvoker, LocalInvoker
from .graph import BundleError, WorkflowGraph, build_graph, load_bundle
from .metrics import Collector, MetricSpan, build_report, end_to_end
from .runtime import AutoscalePolicy, Runtime
from .scheduler import LoadMode, LoadProfile, run_load
from .storage import OBJECT, QUEUE, FileBackend, MemoryBackend, QueueBackend, RemoteBackend, default_registry
from .template import NAME_RE, parse_duration, parse_flat
from .workloads import BUNDLE_ROOT, IoTHubParams, VideoPipelineParams, WindowIndex, builtin_handlers, placement_presets

DEFAULT_TIME_SCALE = Fraction(1, 60)
TIME_SCALE_ENV = "EDGEFLOW_TIME_SCALE"
SCALE_THRESHOLD_MS = 60_000

_AUTOSCALE_KEYS = {"min": "min_replicas", "max": "max_replicas", "factor": "factor",
                   "high": "high_watermark", "low": "low_watermark",
                   "cooldown": "cooldown_ms", "tick": "tick_ms"}
_VIDEO_KEYS = {"fps": int, "chunk_frames": int, "frame_bytes": int,
               "motion_pass_p": float, "face_pass_p": float}
_IOT_KEYS = {"sensors": int, "model_bytes": int}
_IOT_DURATIONS = ("emit_period", "train_period", "train_window", "predict_period",
                  "predict_window", "query_period", "query_window")
_TOP_KEYS = {"scenario", "workflow_dir", "mode", "concurrency", "duration", "seed", "time_scale",
             "requests", "preset", "sync_timeout"}


def parse_time_scale(text: str) -> Fraction:
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"bad time_scale {text!r}") from None
    if value <= 0:
        raise ValueError("time_scale must be > 0")
    return value


def resolve_path(text: str, base: Path | None = None) -> Path:
    """Paths under ``workloads/`` fall back to the bundles shipped in the package."""
    p = Path(text)
    if base is not None and not p.is_absolute() and (base / p).exists():
        return base / p
    if p.exists():
        return p
    parts = p.parts
    if parts and parts[0] == "workloads":
        shipped = BUNDLE_ROOT.joinpath(*parts[1:])
        if shipped.exists():
            return shipped
    return (base / p) if base is not None and not p.is_absolute() else p


@dataclass
class Scenario:
    name: str
    path: Path | None
    workflow_dirs: list[Path]
    mode: LoadMode
    concurrency: int
    duration_ms: float | None
    seed: int
    time_scale: Fraction
    max_requests: int | None = None
    preset: str | None = None
    placement: dict[str, str] = field(default_factory=dict)
    speeds: dict[str, float] = field(default_factory=dict)
    urls: dict[str, str] = field(default_factory=dict)
    delays: dict[tuple[str, str], float] = field(default_factory=dict)
    autoscale: AutoscalePolicy = field(default_factory=AutoscalePolicy)
    backends: dict[str, str] = field(default_factory=dict)
    video: VideoPipelineParams = field(default_factory=VideoPipelineParams)
    iot: IoTHubParams = field(default_factory=IoTHubParams)
    sync_timeout_ms: float = DEFAULT_SYNC_TIMEOUT_MS
    raw: dict[str, str] = field(default_factory=dict)

    # -- deployment ------------------------------------------------------

    def graphs(self) -> dict[str, WorkflowGraph]:
        if not self.workflow_dirs:
            raise ScenarioError("missing required key 'workflow_dir'")
        out = {}
        for d in self.workflow_dirs:
            try:
                bundle = load_bundle(d)
                templates = [self._place(t) for t in bundle.templates]
                g = build_graph(bundle.name, templates)
            except (BundleError, EdgeflowError) as exc:
                raise ScenarioError(f"workflow {d}: {exc}") from exc
            if g.workflow_name in out:
                raise ScenarioError(f"workflow {g.workflow_name!r} listed twice")
            out[g.workflow_name] = g
        return out

    def _place(self, t):
        tiers = {}
        if self.preset is not None:
            tiers.update(placement_presets()[self.preset])
        tiers.update(self.placement)
        if t.name not in tiers and not any(n.function in tiers for _, n in t.nexts):
            return t
        nexts = tuple((i, dataclasses.replace(n, tier=tiers.get(n.function, n.tier))) for i, n in t.nexts)
        return dataclasses.replace(t, tier=tiers.get(t.name, t.tier), nexts=nexts)

    def tiers(self, graphs: dict[str, WorkflowGraph] | None = None) -> list[str]:
        names = set(DEFAULT_SPEEDS) | set(self.speeds) | set(self.urls)
        names |= {t for pair in self.delays for t in pair}
        for g in (graphs or {}).values():
            names |= {t.tier for t in g.nodes.values()}
        return sorted(names)

    def tier_speeds(self, graphs=None) -> dict[str, float]:
        return {t: self.speeds.get(t, DEFAULT_SPEEDS.get(t, 1.0)) for t in self.tiers(graphs)}

    def delay_matrix(self, graphs=None) -> DelayMatrix:
        return DelayMatrix.symmetric(self.tiers(graphs), self.delays, default=0.0)

    def storage(self, clock, simulated: bool = False) -> Any:
        """Backend registry for one process.

        A simulated run never touches the network, so ``remote`` backends
        become local stand-ins of the same kind.
        """
        reg = default_registry()
        entries = {"tsdb": WindowIndex(now=clock.now_ms, windows=self.iot.windows)}
        for name, spec in self.backends.items():
            entries[name] = _backend(name, spec, simulated)
        for name, backend in entries.items():
            reg.register(name, backend, replace=True)
        return reg

    def handlers(self):
        return builtin_handlers(self.video, self.iot)

    def profile(self, seed: int | None = None) -> LoadProfile:
        if self.duration_ms is None:
            raise ScenarioError("missing required key 'duration'")
        return LoadProfile(self.mode, self.duration_ms, self.concurrency,
                           self.seed if seed is None else seed, self.max_requests)

    def config_echo(self, seed: int) -> dict[str, str]:
        echo = dict(sorted(self.raw.items()))
        echo["seed"] = str(seed)
        echo["time_scale"] = str(self.time_scale)
        return echo


_BACKEND_KINDS = ("memory", "queue", "file", "remote")


def _check_backend(spec: str) -> None:
    kind, _, rest = spec.partition(" ")
    if kind not in _BACKEND_KINDS:
        raise ValueError(f"unknown backend kind {kind!r}; expected one of {_BACKEND_KINDS}")
    if kind in ("file", "remote") and not rest.strip():
        raise ValueError(f"{kind} backend needs a {'directory' if kind == 'file' else 'URL'}")
    if kind == "memory" and rest.strip() and not rest.strip().isdigit():
        raise ValueError("memory budget must be an integer byte count")


def _backend(name: str, spec: str, simulated: bool = False):
    _check_backend(spec)
    kind, _, rest = spec.partition(" ")
    rest = rest.strip()
    if kind == "memory":
        return MemoryBackend(int(rest)) if rest else MemoryBackend()
    if kind == "queue":
        return QueueBackend()
    if kind == "file":
        if not rest:
            raise ValueError("file backend needs a directory")
        return FileBackend(rest)
    if kind == "remote":
        url, _, mode = rest.partition(" ")
        if not url:
            raise ValueError("remote backend needs a URL")
        if simulated:
            return QueueBackend() if mode.strip() == "queue" else MemoryBackend()
        return RemoteBackend(url, QUEUE if mode.strip() == "queue" else OBJECT, name=name)
    raise ValueError(f"unknown backend kind {kind!r}")


def _ms(value: str, scale: Fraction) -> float:
    """A duration in ms; bare numbers are milliseconds."""
    try:
        ms = float(value)
    except ValueError:
        ms = parse_duration(value)
    if ms >= SCALE_THRESHOLD_MS:
        ms = float(ms * scale)
    return ms


def parse_scenario(text: str, path: Path | None = None, env: dict | None = None) -> Scenario:
    env = os.environ if env is None else env
    try:
        pairs = parse_flat(text)
    except TemplateError as exc:
        raise ScenarioError(str(exc), exc.line) from exc
    base = path.parent if path is not None else None

    def get(key, default=None):
        return pairs[key][0] if key in pairs else default

    def fail(key, message):
        raise ScenarioError(f"{key}: {message}", pairs[key][1] if key in pairs else None)

    try:
        scale = parse_time_scale(env.get(TIME_SCALE_ENV) or get("time_scale", str(DEFAULT_TIME_SCALE)))
    except ValueError as exc:
        fail("time_scale", exc)

    def number(key, conv, default):
        if key not in pairs:
            return default
        try:
            return conv(pairs[key][0])
        except ValueError:
            fail(key, f"expected {conv.__name__}, got {pairs[key][0]!r}")

    def duration(key, default=None):
        if key not in pairs:
            return default
        try:
            return _ms(pairs[key][0], scale)
        except ValueError as exc:
            fail(key, exc)

    sc = Scenario(
        name=get("scenario", path.name if path is not None else "scenario"),
        path=path,
        workflow_dirs=[resolve_path(d.strip(), base) for d in get("workflow_dir", "").split(",") if d.strip()],
        mode=LoadMode.CLOSED, concurrency=number("concurrency", int, 1),
        duration_ms=duration("duration"), seed=number("seed", int, 0), time_scale=scale,
        max_requests=number("requests", int, None),
        sync_timeout_ms=duration("sync_timeout", DEFAULT_SYNC_TIMEOUT_MS),
        raw={k: v for k, (v, _) in pairs.items()},
    )
    try:
        sc.mode = LoadMode(get("mode", "closed"))
    except ValueError:
        fail("mode", "expected closed or cron")
    for d in sc.workflow_dirs:
        if not d.is_dir():
            fail("workflow_dir", f"no such directory {d}")
    if "preset" in pairs:
        if get("preset") not in placement_presets():
            fail("preset", f"expected one of {sorted(placement_presets())}")
        sc.preset = get("preset")

    policy: dict[str, Any] = {}
    video: dict[str, Any] = {}
    video_costs = dict(VideoPipelineParams().costs_ms)
    iot: dict[str, Any] = {}
    iot_costs = dict(IoTHubParams().costs_ms)
    for key, (value, line) in pairs.items():
        if key in _TOP_KEYS:
            continue
        head, _, rest = key.partition(".")
        try:
            if head == "place" and NAME_RE.fullmatch(rest or "") and NAME_RE.fullmatch(value):
                sc.placement[rest] = value
            elif head == "tier" and rest.count(".") == 1:
                tier, attr = rest.split(".")
                if attr == "speed":
                    sc.speeds[tier] = float(value)
                    if not sc.speeds[tier] > 0:
                        raise ValueError("speed must be > 0")
                elif attr == "url":
                    sc.urls[tier] = value
                else:
                    raise KeyError(key)
            elif head == "delay" and rest.count(".") == 1:
                a, b = rest.split(".")
                sc.delays[(a, b)] = _ms(value, Fraction(1))
                if sc.delays[(a, b)] < 0:
                    raise ValueError("delay must be >= 0")
            elif head == "autoscale" and rest in _AUTOSCALE_KEYS:
                conv = int if rest in ("min", "max") else float
                policy[_AUTOSCALE_KEYS[rest]] = _ms(value, Fraction(1)) if rest in ("cooldown", "tick") else conv(value)
            elif head == "backend" and NAME_RE.fullmatch(rest or ""):
                _check_backend(value)
                sc.backends[rest] = value
            elif head == "video" and rest in _VIDEO_KEYS:
                video[rest] = _VIDEO_KEYS[rest](value)
            elif head == "video" and rest.startswith("cost.") and rest[5:] in video_costs:
                video_costs[rest[5:]] = float(value)
            elif head == "iot" and rest in _IOT_KEYS:
                iot[rest] = _IOT_KEYS[rest](value)
            elif head == "iot" and rest in _IOT_DURATIONS:
                iot[rest + "_ms"] = _ms(value, Fraction(1))
            elif head == "iot" and rest.startswith("cost.") and rest[5:] in iot_costs:
                iot_costs[rest[5:]] = float(value)
            else:
                raise KeyError(key)
        except KeyError:
            raise ScenarioError(f"unknown key {key!r}", line) from None
        except ValueError as exc:
            raise ScenarioError(f"{key}: {exc}", line) from None
    try:
        sc.autoscale = AutoscalePolicy(**policy)
        sc.video = VideoPipelineParams(**video, costs_ms=video_costs)
        # minute-level IoT periods and windows follow the run's time scale
        sc.iot = IoTHubParams(**iot, costs_ms=iot_costs).scaled(float(scale))
        if sc.duration_ms is not None:
            sc.profile()
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    return sc


def load_scenario(path: str | Path, env: dict | None = None) -> Scenario:
    path = resolve_path(str(path))
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return parse_scenario(text, path, env)


# -- running -----------------------------------------------------------------


@dataclass
class SimDeployment:
    """Everything a simulated run needs, wired together."""

    scenario: Scenario
    seed: int
    clock: SimClock
    graphs: dict[str, WorkflowGraph]
    runtime: Runtime
    invoker: LocalInvoker
    collector: Collector


def build_sim(scenario: Scenario, seed: int | None = None) -> SimDeployment:
    seed = scenario.seed if seed is None else seed
    graphs = scenario.graphs()
    clock = SimClock()
    collector = Collector()
    invoker = LocalInvoker(clock, scenario.delay_matrix(graphs), scenario.tiers(graphs),
                           scenario.sync_timeout_ms)
    runtime = Runtime(graphs, scenario.storage(clock, simulated=True), scenario.handlers(), invoker, clock,
                      collector=collector, speeds=scenario.tier_speeds(graphs),
                      policy=scenario.autoscale, seed=seed)
    invoker.bind(runtime)
    try:
        runtime.validate()
    except EdgeflowError as exc:
        raise ScenarioError(str(exc)) from exc
    return SimDeployment(scenario, seed, clock, graphs, runtime, invoker, collector)


def _targets(scenario: Scenario, graphs: dict[str, WorkflowGraph]) -> list[WorkflowGraph]:
    if scenario.mode is LoadMode.CRON:
        missing = [n for n, g in graphs.items() if g.entry_template.cron is None]
        if missing:
            raise ScenarioError(f"mode cron needs a cron entry; {missing} have none")
    return list(graphs.values())


def _report(scenario: Scenario, seed: int, spans, stats, autoscale) -> dict[str, Any]:
    report = build_report(spans, scenario=scenario.name, time_scale=float(scenario.time_scale),
                          config=scenario.config_echo(seed), autoscale=autoscale,
                          workflow=",".join(s.workflow for s in stats))
    report["load"] = [s.to_dict() for s in stats]
    return report


def run_sim(scenario: Scenario, seed: int | None = None) -> tuple[dict[str, Any], SimDeployment]:
    dep = build_sim(scenario, seed)
    targets = _targets(scenario, dep.graphs)
    profile = scenario.profile(dep.seed)

    async def main():
        dep.runtime.log_replicas()
        scaler = asyncio.ensure_future(dep.runtime.autoscaler())
        try:
            return await asyncio.gather(*(run_load(g, profile, dep.invoker, dep.clock) for g in targets))
        finally:
            scaler.cancel()

    stats = dep.clock.run(main())
    report = _report(scenario, dep.seed, dep.collector.snapshot(), stats, dep.runtime.autoscale_log)
    return report, dep


async def collect_remote_spans(invoker: HttpInvoker, tiers, request_ids: set[str],
                               settle_s: float = 5.0, poll_s: float = 0.2) -> list[MetricSpan]:
    """Pull spans from every tier until the request trees stop growing."""
    deadline = asyncio.get_running_loop().time() + settle_s
    last = -1
    while True:
        spans = []
        for tier in tiers:
            for d in await invoker.fetch_spans(tier):
                if d["request_id"] in request_ids:
                    spans.append(MetricSpan.from_dict(d))
        join = end_to_end(spans)
        if (not join.incomplete and len(spans) == last) or asyncio.get_running_loop().time() > deadline:
            return sorted(spans, key=lambda s: (s.request_id, s.start, s.invocation_id, s.kind.value))
        last = len(spans)
        await asyncio.sleep(poll_s)


def run_real(scenario: Scenario, seed: int | None = None) -> dict[str, Any]:
    """Drive live gateways (``tier.<name>.url``) and join their span dumps."""
    seed = scenario.seed if seed is None else seed
    graphs = scenario.graphs()
    targets = _targets(scenario, graphs)
    used = sorted({t.tier for g in graphs.values() for t in g.nodes.values()})
    missing = [t for t in used if t not in scenario.urls]
    if missing:
        raise ScenarioError(f"real mode needs tier.<name>.url for {missing}")
    clock = RealClock()
    invoker = HttpInvoker(scenario.urls, scenario.sync_timeout_ms)
    profile = scenario.profile(seed)

    async def main():
        try:
            stats = await asyncio.gather(*(run_load(g, profile, invoker, clock) for g in targets))
            ids = {rid for s in stats for rid in s.request_ids}
            spans = await collect_remote_spans(invoker, used, ids)
            return stats, spans
        finally:
            await invoker.close()

    try:
        stats, spans = clock.run(main())
    finally:
        clock.close()
    return _report(scenario, seed, spans, stats, [])


def run_scenario(scenario: Scenario | str | Path, real: bool = False, seed: int | None = None) -> dict[str, Any]:
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    if real:
        return run_real(scenario, seed)
    return run_sim(scenario, seed)[0]
