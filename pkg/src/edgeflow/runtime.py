"""The function wrapper: load inputs, run the handler, store outputs, invoke successors.

``Runtime.execute`` is the single execution path for both simulated and
real deployments; only the clock and the invoker differ.
"""

from __future__ import annotations

import asyncio
import dataclasses
import hashlib
import math
import random
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .errors import (
    DownstreamFailure,
    DuplicateHandler,
    EdgeflowError,
    HandlerPanic,
    InputMissing,
    InvokeTimeout,
    NoBranchMatch,
    NotFound,
    StartupValidation,
    UnknownFunction,
)
from .graph import WorkflowGraph, successors
from .metrics import Collector, MetricSpan, SpanKind
from .storage import OBJECT, BackendRegistry, DataObject, timed_load, timed_store
from .template import NextSpec, StorageRef, SyncMode

ENVELOPE_VERSION = 1


def derive_id(*parts: object) -> str:
    """Deterministic uuid-shaped id from its parts."""
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return str(uuid.UUID(bytes=digest[:16], version=4))


# -- handlers ----------------------------------------------------------------


@dataclass
class HandlerContext:
    workflow: str
    function: str
    tier: str
    request_id: str
    invocation_id: str
    seed: int
    now_ms: float
    labels: dict[str, Any] = field(default_factory=dict)

    def rng(self, *salt: object) -> random.Random:
        """RNG private to this invocation."""
        return random.Random("|".join(map(str, (self.seed, self.invocation_id) + salt)))

    def keyed_rng(self, *key: object) -> random.Random:
        """RNG keyed only by the run seed and ``key`` (e.g. a frame id)."""
        return random.Random("|".join(map(str, (self.seed,) + key)))


HandlerFn = Callable[[list, HandlerContext], Iterable[tuple[str, bytes]]]


@dataclass(frozen=True)
class Handler:
    """A handler procedure plus its synthetic compute cost.

    ``fn(inputs, ctx)`` returns ``(data_name, bytes)`` pairs; the data name
    selects the output slot and, on branching stages, the branch.
    ``cost_ms`` is spent before ``fn`` runs, divided by the tier speed.
    Input slots listed in ``optional_inputs`` arrive as ``None`` when absent.
    """

    fn: HandlerFn
    cost_ms: float = 0.0
    optional_inputs: frozenset[int] = frozenset()


class HandlerRegistry:
    def __init__(self):
        self._entries: dict[str, Handler] = {}

    def register(self, handler_id: str, h: Handler | HandlerFn, cost_ms: float = 0.0) -> None:
        if handler_id in self._entries:
            raise DuplicateHandler(handler_id)
        self._entries[handler_id] = h if isinstance(h, Handler) else Handler(h, cost_ms)

    def __getitem__(self, handler_id: str) -> Handler:
        return self._entries[handler_id]

    def __contains__(self, handler_id: str) -> bool:
        return handler_id in self._entries

    def ids(self) -> list[str]:
        return sorted(self._entries)


def register_handler(handlers: HandlerRegistry, handler_id: str, h: Handler | HandlerFn,
                     cost_ms: float = 0.0) -> None:
    handlers.register(handler_id, h, cost_ms)


# -- envelopes ---------------------------------------------------------------


@dataclass(frozen=True)
class InvocationEnvelope:
    workflow: str
    request_id: str
    invocation_id: str
    function: str
    hop: int = 0
    data_keys: tuple[str, ...] = ()
    issued_at: float = 0
    sync: SyncMode = SyncMode.SYNC
    parent_id: str | None = None
    version: int = ENVELOPE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "sync", SyncMode(self.sync))
        object.__setattr__(self, "data_keys", tuple(self.data_keys))
        if self.hop < 0:
            raise ValueError("hop must be >= 0")

    @classmethod
    def entry(cls, workflow: str, function: str, request_id: str, sync: SyncMode, now: float):
        return cls(workflow, request_id, derive_id(request_id, 0), function,
                   issued_at=now, sync=sync)

    def child(self, function: str, ordinal: int, data_keys: Sequence[str], sync: SyncMode,
              now: float) -> InvocationEnvelope:
        return InvocationEnvelope(
            workflow=self.workflow, request_id=self.request_id,
            invocation_id=derive_id(self.invocation_id, ordinal), function=function,
            hop=self.hop + 1, data_keys=tuple(data_keys), issued_at=now, sync=sync,
            parent_id=self.invocation_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version, "workflow": self.workflow, "request_id": self.request_id,
            "invocation_id": self.invocation_id, "parent_id": self.parent_id,
            "function": self.function, "hop": self.hop, "data_keys": list(self.data_keys),
            "issued_at": int(self.issued_at), "sync": self.sync.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> InvocationEnvelope:
        """Strict wire decoding; raises ValueError on any schema violation."""
        expected = {"version", "workflow", "request_id", "invocation_id", "parent_id",
                    "function", "hop", "data_keys", "issued_at", "sync"}
        if not isinstance(d, Mapping) or set(d) != expected:
            raise ValueError(f"envelope fields must be exactly {sorted(expected)}")
        if d["version"] != ENVELOPE_VERSION:
            raise ValueError(f"unsupported envelope version {d['version']!r}")
        for key in ("workflow", "request_id", "invocation_id", "function"):
            if not isinstance(d[key], str) or not d[key]:
                raise ValueError(f"{key} must be a non-empty string")
        if d["parent_id"] is not None and not isinstance(d["parent_id"], str):
            raise ValueError("parent_id must be a string or null")
        if type(d["hop"]) is not int or type(d["issued_at"]) not in (int, float):
            raise ValueError("hop and issued_at must be integers")
        if not isinstance(d["data_keys"], list) or not all(isinstance(k, str) for k in d["data_keys"]):
            raise ValueError("data_keys must be a list of strings")
        for k in d["data_keys"]:
            try:
                StorageRef.parse(k)
            except EdgeflowError as exc:
                raise ValueError(str(exc)) from None
        return cls(workflow=d["workflow"], request_id=d["request_id"],
                   invocation_id=d["invocation_id"], function=d["function"], hop=d["hop"],
                   data_keys=tuple(d["data_keys"]), issued_at=d["issued_at"],
                   sync=SyncMode(d["sync"]), parent_id=d["parent_id"])


@dataclass
class ExecutionResult:
    request_id: str
    outputs: list[str]
    spans: list[MetricSpan]
    end_to_end_ms: float


# -- autoscaling -------------------------------------------------------------


@dataclass(frozen=True)
class AutoscalePolicy:
    min_replicas: int = 25
    max_replicas: int = 100
    factor: float = 0.25
    high_watermark: float = 1.0
    low_watermark: float = 0.25
    cooldown_ms: float = 2000
    tick_ms: float = 1000

    def __post_init__(self):
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")
        if not 0 < self.factor <= 1:
            raise ValueError("factor must be in (0, 1]")
        if self.low_watermark > self.high_watermark:
            raise ValueError("low_watermark above high_watermark")


def autoscale_tick(replicas: int, inflight: int, policy: AutoscalePolicy,
                   cooldown_elapsed: bool = True) -> int:
    """One scaling decision from the inflight-per-replica load."""
    replicas = min(policy.max_replicas, max(policy.min_replicas, replicas))
    if not cooldown_elapsed:
        return replicas
    load = Fraction(inflight, replicas)
    factor = Fraction(policy.factor)
    if load > Fraction(policy.high_watermark):
        return min(policy.max_replicas, math.ceil(replicas * (1 + factor)))
    if load < Fraction(policy.low_watermark):
        return max(policy.min_replicas, math.floor(replicas * (1 - factor)))
    return replicas


def autoscale_trace(inflight: Iterable[int], policy: AutoscalePolicy,
                    replicas: int | None = None) -> list[int]:
    """Replica count after each tick for a driven inflight series (one value per tick)."""
    r = policy.min_replicas if replicas is None else replicas
    last_change = -math.inf
    out = []
    for i, load in enumerate(inflight):
        now = i * policy.tick_ms
        new = autoscale_tick(r, load, policy, now - last_change >= policy.cooldown_ms)
        if new != r:
            last_change = now
        r = new
        out.append(r)
    return out


class WorkerPool:
    """Bounds concurrent handler executions of one function to its replica count."""

    def __init__(self, function: str, policy: AutoscalePolicy):
        self.function = function
        self.policy = policy
        self.replicas = policy.min_replicas
        self.inflight = 0
        self.active = 0
        self.last_change = -math.inf
        self._cond: asyncio.Condition | None = None

    def _condition(self) -> asyncio.Condition:
        if self._cond is None:
            self._cond = asyncio.Condition()
        return self._cond

    @asynccontextmanager
    async def slot(self):
        cond = self._condition()
        self.inflight += 1
        try:
            async with cond:
                await cond.wait_for(lambda: self.active < self.replicas)
                self.active += 1
            try:
                yield
            finally:
                async with cond:
                    self.active -= 1
                    cond.notify_all()
        finally:
            self.inflight -= 1

    async def tick(self, now: float) -> bool:
        new = autoscale_tick(self.replicas, self.inflight, self.policy,
                             now - self.last_change >= self.policy.cooldown_ms)
        if new == self.replicas:
            return False
        self.replicas = new
        self.last_change = now
        cond = self._condition()
        async with cond:
            cond.notify_all()
        return True


# -- execution ---------------------------------------------------------------


class Invoker(Protocol):
    async def invoke(self, target: NextSpec, env: InvocationEnvelope,
                     src_tier: str | None) -> ExecutionResult | None: ...

    def network_ms(self, src: str | None, dst: str) -> float | None: ...


class Runtime:
    def __init__(
        self,
        graphs: Mapping[str, WorkflowGraph] | WorkflowGraph,
        storage: BackendRegistry,
        handlers: HandlerRegistry,
        invoker: Invoker,
        clock,
        *,
        collector: Collector | None = None,
        speeds: Mapping[str, float] | None = None,
        policy: AutoscalePolicy | None = None,
        seed: int = 0,
        tiers: Iterable[str] | None = None,
    ):
        if isinstance(graphs, WorkflowGraph):
            graphs = {graphs.workflow_name: graphs}
        self.graphs = dict(graphs)
        self.storage = storage
        self.handlers = handlers
        self.invoker = invoker
        self.clock = clock
        self.collector = collector if collector is not None else Collector()
        self.speeds = dict(speeds or {})
        self.policy = policy or AutoscalePolicy()
        self.seed = seed
        self.tiers = set(tiers) if tiers is not None else None
        self.pools: dict[tuple[str, str], WorkerPool] = {}
        self.autoscale_log: list[dict[str, Any]] = []
        self._t0: float | None = None
        for wf, g in self.graphs.items():
            for name, t in g.nodes.items():
                if self.tiers is None or t.tier in self.tiers:
                    self.pools[(wf, name)] = WorkerPool(name, self.policy)

    # validation

    def problems(self) -> list[str]:
        out = []
        for g in self.graphs.values():
            for t in g.nodes.values():
                if self.tiers is not None and t.tier not in self.tiers:
                    continue
                if t.handler not in self.handlers:
                    out.append(f"{g.workflow_name}/{t.name}: unregistered handler {t.handler!r}")
                for ref in list(t.inputs) + [o.ref for o in t.outputs]:
                    if ref.backend not in self.storage:
                        out.append(f"{g.workflow_name}/{t.name}: unknown backend {ref.backend!r}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise StartupValidation(problems)

    def serves(self, workflow: str, function: str, tier: str | None = None) -> bool:
        g = self.graphs.get(workflow)
        if g is None or function not in g.nodes:
            return False
        deployed = g.nodes[function].tier
        if tier is not None and deployed != tier:
            return False
        return self.tiers is None or deployed in self.tiers

    # autoscaling

    def elapsed_ms(self) -> float:
        now = self.clock.now_ms()
        if self._t0 is None:
            self._t0 = now
        return now - self._t0

    def log_replicas(self) -> None:
        t = self.elapsed_ms()
        for (wf, fn), pool in self.pools.items():
            self.autoscale_log.append({"t_ms": round(t, 6), "function": fn, "replicas": pool.replicas})

    async def autoscaler(self) -> None:
        """Tick every pool at the policy cadence until cancelled."""
        self.elapsed_ms()
        while True:
            await self.clock.sleep(self.policy.tick_ms)
            t = self.elapsed_ms()
            for (wf, fn), pool in self.pools.items():
                if await pool.tick(t):
                    self.autoscale_log.append({"t_ms": round(t, 6), "function": fn,
                                               "replicas": pool.replicas})

    # execution

    def _placed(self, ref: StorageRef, forwarded: bool, env: InvocationEnvelope) -> StorageRef:
        # forwarded objects get a per-invocation key so concurrent requests never collide
        if forwarded and self.storage.kind(ref.backend) == OBJECT:
            return StorageRef(ref.backend, f"{ref.key}/{env.invocation_id}")
        return ref

    async def _io(self, fn, *args, **kwargs):
        backend = self.storage.get(args[1].backend)
        if backend.blocking:
            return await self.clock.run_blocking(lambda: fn(*args, **kwargs))
        return fn(*args, **kwargs)

    async def execute(self, env: InvocationEnvelope, tier: str) -> ExecutionResult:
        clock = self.clock
        now = clock.now_ms
        t_start = now()
        if not self.serves(env.workflow, env.function, tier):
            raise UnknownFunction(env.function)
        g = self.graphs[env.workflow]
        node = g.nodes[env.function]
        if node.handler not in self.handlers:
            raise StartupValidation([f"unregistered handler {node.handler!r}"])
        handler = self.handlers[node.handler]
        fields = {"workflow": env.workflow, "function": env.function, "tier": tier,
                  "request_id": env.request_id, "invocation_id": env.invocation_id}
        spans: list[MetricSpan] = []

        def emit(span: MetricSpan) -> None:
            spans.append(span)
            self.collector.record(span)

        h_start, h_end = t_start, None
        fanout = 0
        local_error: BaseException | None = None
        outputs: list[str] = []
        ctx: HandlerContext | None = None
        try:
            try:
                refs = [StorageRef.parse(k) for k in env.data_keys]
                refs += list(node.inputs[len(refs):])
                inputs = []
                for slot, ref in enumerate(refs):
                    inputs.append(await self._load_input(ref, slot, handler, emit, fields))

                ctx = HandlerContext(env.workflow, env.function, tier, env.request_id,
                                     env.invocation_id, self.seed, now())
                pool = self.pools[(env.workflow, env.function)]
                async with pool.slot():
                    h_start = now()
                    await clock.compute(handler.cost_ms / self.speeds.get(tier, 1.0))
                    try:
                        produced = [(str(name), bytes(data)) for name, data in handler.fn(inputs, ctx)]
                    except Exception as exc:
                        raise HandlerPanic(env.function, exc) from exc
                    finally:
                        h_end = now()

                calls: list[tuple[NextSpec, StorageRef]] = []
                for name, data in produced:
                    spec = next((o for o in node.outputs if o.data_name == name), None)
                    if spec is None:
                        raise NoBranchMatch(env.function, name)
                    targets = successors(g, env.function, name)
                    ref = self._placed(spec.ref, bool(node.nexts), env)
                    await self._io(timed_store, self.storage, ref, DataObject(ref.key, data, now()),
                                   now=now, emit=emit, **fields)
                    outputs.append(str(ref))
                    calls.extend((t, ref) for t in targets)
            except BaseException as exc:
                local_error = exc
                raise

            fanout = len(calls)
            envs = [env.child(t.function, i, [str(ref)], g.nodes[t.function].sync, now())
                    for i, (t, ref) in enumerate(calls)]
            results = await asyncio.gather(
                *(self._call(t, child, tier, emit, fields) for (t, _), child in zip(calls, envs)),
                return_exceptions=True)
            for r in results:
                if isinstance(r, BaseException):
                    raise r
                if r is not None:
                    outputs.extend(r.outputs)
        finally:
            end = h_end if h_end is not None else now()
            emit(MetricSpan(
                kind=SpanKind.HANDLER, start=h_start, duration=max(0.0, end - h_start),
                failed=local_error is not None,
                error=type(local_error).__name__ if local_error is not None else None,
                labels={"parent_id": env.parent_id, "hop": env.hop, "fanout": fanout,
                        **(ctx.labels if ctx is not None else {})},
                **fields))
        return ExecutionResult(env.request_id, outputs, spans, now() - t_start)

    async def _load_input(self, ref, slot, handler, emit, fields):
        collected: list[MetricSpan] = []
        try:
            timed = await self._io(timed_load, self.storage, ref, now=self.clock.now_ms,
                                   emit=collected.append, **fields)
        except NotFound:
            span = collected[0]
            if slot in handler.optional_inputs:
                emit(dataclasses.replace(span, failed=False, error=None,
                                         labels={**span.labels, "missing": True}))
                return None
            emit(span)
            raise InputMissing(ref) from None
        except BaseException:
            for s in collected:
                emit(s)
            raise
        emit(collected[0])
        return timed.result

    async def _call(self, target: NextSpec, child: InvocationEnvelope, tier: str, emit, fields):
        t0 = self.clock.now_ms()
        labels = {"src": tier, "dst": target.tier, "target": target.function,
                  "child": child.invocation_id, "sync": child.sync.value}
        network = self.invoker.network_ms(tier, target.tier)
        if network is not None:
            labels["network_ms"] = network * (2 if child.sync is SyncMode.SYNC else 1)
        try:
            result = await self.invoker.invoke(target, child, tier)
        except BaseException as exc:
            emit(MetricSpan(kind=SpanKind.COMM, start=t0,
                            duration=max(0.0, self.clock.now_ms() - t0), failed=True,
                            error=type(exc).__name__, labels=labels, **fields))
            if isinstance(exc, (InvokeTimeout, asyncio.CancelledError)) or not isinstance(exc, EdgeflowError):
                raise
            raise DownstreamFailure(target.function, target.tier, exc) from exc
        emit(MetricSpan(kind=SpanKind.COMM, start=t0, duration=max(0.0, self.clock.now_ms() - t0),
                        labels=labels, **fields))
        return result

