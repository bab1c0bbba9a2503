"""Shared builders for the test suite: small graphs, a sim harness, random templates."""

from __future__ import annotations

import asyncio
import random

from edgeflow.clock import SimClock
from edgeflow.errors import (
    DuplicateKey,
    IndexMismatch,
    InvalidCron,
    InvalidRef,
    InvalidValue,
    MissingKey,
    TemplateSyntaxError,
    UnknownKey,
)
from edgeflow.gateway import DelayMatrix, LocalInvoker
from edgeflow.graph import build_graph
from edgeflow.metrics import Collector, SpanKind
from edgeflow.runtime import Handler, HandlerRegistry, InvocationEnvelope, Runtime
from edgeflow.storage import default_registry
from edgeflow.template import CronSpec, FunctionTemplate, NextSpec, OutputSpec, StorageRef, SyncMode

TIERS = ("iot", "edge", "cloud")


def ref(text: str) -> StorageRef:
    return StorageRef.parse(text)


def chain(costs, tiers, sync=SyncMode.SYNC, name="chain", backend="memory"):
    """A linear pipeline s0 -> s1 -> ... with pass-through handlers."""
    n = len(costs)
    templates, handlers = [], HandlerRegistry()
    for i, (cost, tier) in enumerate(zip(costs, tiers)):
        nexts = ((0, NextSpec(f"s{i + 1}", tiers[i + 1])),) if i + 1 < n else ()
        templates.append(FunctionTemplate(
            name=f"s{i}", tier=tier, handler=f"h.s{i}", sync=sync,
            inputs=(ref(f"{backend}://d{i - 1}"),) if i else (),
            outputs=(OutputSpec(ref(f"{backend}://d{i}")),), nexts=nexts))
        handlers.register(f"h.s{i}", Handler(_emit(f"d{i}"), cost))
    return build_graph(name, templates), handlers


def _emit(data_name, payload=b"x"):
    def fn(inputs, ctx):
        return [(data_name, payload)]
    return fn


def branching(name="fork"):
    """decide -> (left | right), choosing per request with the invocation RNG."""
    def decide(inputs, ctx):
        side = "left" if ctx.rng("side").random() < 0.5 else "right"
        return [(side, side.encode())]

    templates = [
        FunctionTemplate("decide", "edge", "h.decide",
                         outputs=(OutputSpec(ref("memory://left"), 1), OutputSpec(ref("memory://right"), 2)),
                         nexts=((1, NextSpec("go-left", "edge")), (2, NextSpec("go-right", "edge")))),
        FunctionTemplate("go-left", "edge", "h.left", inputs=(ref("memory://left"),),
                         outputs=(OutputSpec(ref("memory://l-done")),)),
        FunctionTemplate("go-right", "edge", "h.right", inputs=(ref("memory://right"),),
                         outputs=(OutputSpec(ref("memory://r-done")),)),
    ]
    handlers = HandlerRegistry()
    handlers.register("h.decide", Handler(decide, 1.0))
    handlers.register("h.left", Handler(_emit("l-done"), 1.0))
    handlers.register("h.right", Handler(_emit("r-done"), 1.0))
    return build_graph(name, templates), handlers


class SimHarness:
    """Runtime + LocalInvoker on a simulated clock."""

    def __init__(self, graphs, handlers, delays=None, speeds=None, seed=0, policy=None,
                 storage=None, timeout_ms=30_000):
        self.clock = SimClock()
        self.collector = Collector()
        graphs = graphs if isinstance(graphs, dict) else {graphs.workflow_name: graphs}
        self.graphs = graphs
        self.invoker = LocalInvoker(self.clock, delays or DelayMatrix.symmetric(TIERS), timeout_ms=timeout_ms)
        self.runtime = Runtime(graphs, storage or default_registry(), handlers, self.invoker, self.clock,
                               collector=self.collector, speeds=speeds or {}, policy=policy, seed=seed)
        self.invoker.bind(self.runtime)

    def entry_env(self, g, rid):
        e = g.entry_template
        return InvocationEnvelope.entry(g.workflow_name, e.name, rid, e.sync, self.clock.now_ms())

    async def submit(self, g, rid):
        return await self.invoker.submit(self.entry_env(g, rid), g.entry_template.tier)

    def run(self, coro_factory):
        async def main():
            result = await coro_factory()
            await self.invoker.drain()
            return result
        return self.clock.run(main())

    def run_requests(self, g, rids, concurrent=True):
        async def go():
            if concurrent:
                return await asyncio.gather(*(self.submit(g, r) for r in rids), return_exceptions=True)
            out = []
            for r in rids:
                try:
                    out.append(await self.submit(g, r))
                except Exception as exc:
                    out.append(exc)
            return out
        return self.run(go)

    def spans(self, kind=None):
        spans = self.collector.snapshot()
        return [s for s in spans if kind is None or s.kind is SpanKind(kind)]


# -- random templates --------------------------------------------------------

_WORDS = ("gop", "frames", "faces", "model", "rows", "chunk", "alpha", "beta", "sink", "feed")
_BACKENDS = ("memory", "minio", "s3", "kafka", "queue", "file")


def _name(r):
    return r.choice(("gen", "detect", "train", "merge", "stage", "fn")) + "-" + str(r.randrange(1000))


def random_template(r: random.Random) -> FunctionTemplate:
    """A valid template of any shape: terminal, pipeline, one-to-many, or branching."""
    def rref():
        return StorageRef(r.choice(_BACKENDS), f"{r.choice(_WORDS)}{r.randrange(100)}")

    inputs = tuple(rref() for _ in range(r.randrange(4)))
    shape = r.choice(("terminal", "pipeline", "fanout", "branch"))
    tiers = TIERS + ("fog",)
    if shape == "terminal":
        k = r.randrange(3)
        if k == 1:
            outputs = (OutputSpec(rref()),)
        else:
            outputs = tuple(OutputSpec(StorageRef(r.choice(_BACKENDS), f"o{i}x{r.randrange(9)}"), i)
                            for i in range(1, k + 1))
        nexts = ()
    elif shape == "pipeline":
        outputs = (OutputSpec(rref()),)
        nexts = ((0, NextSpec(_name(r), r.choice(tiers))),)
    elif shape == "fanout":
        outputs = (OutputSpec(rref()),)
        nexts = tuple((0, NextSpec(_name(r), r.choice(tiers))) for _ in range(r.randrange(2, 5)))
    else:
        k = r.randrange(2, 5)
        outputs = tuple(OutputSpec(StorageRef(r.choice(_BACKENDS), f"branch{i}"), i) for i in range(1, k + 1))
        picked = sorted(r.sample(range(1, k + 1), r.randrange(1, k + 1)))
        nexts = tuple((i, NextSpec(_name(r), r.choice(tiers))) for i in picked)
    cron = None
    if r.random() < 0.3:
        cron = CronSpec(r.choice((1, 3, 5, 60, 1800, 3600)) * 1000, r.choice((1, 1, 20, 80)))
    return FunctionTemplate(
        name=_name(r), tier=r.choice(tiers), handler=r.choice(("video.motion", "iot.query", "h.x_1")),
        sync=r.choice(tuple(SyncMode)), inputs=inputs, outputs=outputs, nexts=nexts, cron=cron)


def _lines(text):
    return text.splitlines()


def _replace(lines, key, value):
    return [f"{key}: {value}" if ln.split(":", 1)[0] == key else ln for ln in lines]


def corrupt(text: str, t: FunctionTemplate, kind: str):
    """Apply one named corruption; returns (text, expected error class)."""
    lines = _lines(text)
    if kind == "indent":
        lines[1] = "  " + lines[1]
        return "\n".join(lines), TemplateSyntaxError
    if kind == "no_colon":
        lines.insert(2, "this line has no separator")
        return "\n".join(lines), TemplateSyntaxError
    if kind == "unknown_key":
        lines.append("colour: red")
        return "\n".join(lines), UnknownKey
    if kind == "duplicate":
        lines.append(f"tier: {t.tier}")
        return "\n".join(lines), DuplicateKey
    if kind == "missing":
        return "\n".join(ln for ln in lines if not ln.startswith("handler:")), MissingKey
    if kind == "bad_sync":
        return "\n".join(_replace(lines, "sync", "maybe")), InvalidValue
    if kind == "bad_name":
        return "\n".join(_replace(lines, "name", "Not_Valid")), InvalidValue
    if kind == "bad_ref":
        if t.inputs:
            lines = _replace(lines, "input", "no-scheme-here")
        else:
            lines.append("input: no-scheme-here")
        return "\n".join(lines), InvalidRef
    if kind == "bad_cron":
        if t.cron is not None:
            lines = _replace(lines, "cron", "5x")
        else:
            lines.append("cron: 5x")
        return "\n".join(lines), InvalidCron
    if kind == "unpaired_next":
        lines.append("next_function9: orphan")
        return "\n".join(lines), IndexMismatch
    raise ValueError(kind)


CORRUPTIONS = ("indent", "no_colon", "unknown_key", "duplicate", "missing", "bad_sync",
               "bad_name", "bad_ref", "bad_cron", "unpaired_next")
