"""Tier registry, invokers, and the per-tier HTTP service.

Two invokers share the ``Runtime`` above them:

* ``LocalInvoker`` dispatches in-process, injecting one-way network delay
  from a ``DelayMatrix`` on the request leg (and on the response leg for
  sync calls). With a ``SimClock`` this is the deterministic simulator.
* ``HttpInvoker`` POSTs envelopes to other tiers' gateways.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping
from urllib.parse import unquote

import aiohttp
from aiohttp import web

from .errors import (
    BindError,
    DownstreamFailure,
    EdgeflowError,
    InvokeTimeout,
    NotFound,
    TierUnreachable,
    UnknownFunction,
)
from .metrics import Collector
from .runtime import ExecutionResult, InvocationEnvelope, Runtime
from .storage import DataObject, MemoryBackend, QueueBackend
from .template import NAME_RE, NextSpec, SyncMode

DEFAULT_SPEEDS = {"iot": 0.25, "edge": 1.0, "cloud": 2.0}
DEFAULT_SYNC_TIMEOUT_MS = 30_000


@dataclass(frozen=True)
class TierDescriptor:
    name: str
    speed: float = 1.0
    base_url: str | None = None
    served_functions: frozenset[str] = frozenset()

    def __post_init__(self):
        if not NAME_RE.fullmatch(self.name):
            raise ValueError(f"bad tier name {self.name!r}")
        if not self.speed > 0:
            raise ValueError(f"tier speed must be > 0, got {self.speed}")


@dataclass(frozen=True)
class DelayMatrix:
    """One-way latency in ms between every ordered pair of tiers."""

    one_way_ms: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        tiers = self.tiers
        for (a, b), ms in self.one_way_ms.items():
            if ms < 0:
                raise ValueError(f"negative delay {a}->{b}")
            if a == b and ms != 0:
                raise ValueError(f"delay {a}->{a} must be 0")
        missing = [(a, b) for a in tiers for b in tiers if a != b and (a, b) not in self.one_way_ms]
        if missing:
            raise ValueError(f"delay matrix is missing pairs {missing}")

    @property
    def tiers(self) -> list[str]:
        return sorted({t for pair in self.one_way_ms for t in pair})

    @classmethod
    def symmetric(cls, tiers: Iterable[str], pairs: Mapping[tuple[str, str], float] | None = None,
                  default: float | None = 0.0) -> DelayMatrix:
        """Fill both directions from ``pairs``; unspecified pairs get ``default``."""
        tiers = list(tiers)
        pairs = dict(pairs or {})
        table = {}
        for a in tiers:
            for b in tiers:
                if a == b:
                    table[(a, b)] = 0.0
                elif (a, b) in pairs:
                    table[(a, b)] = float(pairs[(a, b)])
                elif (b, a) in pairs:
                    table[(a, b)] = float(pairs[(b, a)])
                elif default is not None:
                    table[(a, b)] = float(default)
        return cls(table)

    def get(self, src: str | None, dst: str) -> float:
        if src is None or src == dst:
            return 0.0
        return self.one_way_ms[(src, dst)]


class LocalInvoker:
    """In-process dispatch with injected network delay."""

    def __init__(self, clock, delays: DelayMatrix | None = None, tiers: Iterable[str] | None = None,
                 timeout_ms: float = DEFAULT_SYNC_TIMEOUT_MS):
        self.clock = clock
        self.delays = delays or DelayMatrix()
        self.tiers = set(tiers) if tiers is not None else None
        self.timeout_ms = timeout_ms
        self.runtime: Runtime | None = None
        self._background: set[asyncio.Task] = set()

    def bind(self, runtime: Runtime) -> LocalInvoker:
        self.runtime = runtime
        return self

    def network_ms(self, src: str | None, dst: str) -> float:
        return self.delays.get(src, dst)

    def _check(self, tier: str) -> None:
        if self.tiers is not None and tier not in self.tiers:
            raise TierUnreachable(tier)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._background.add(task)
        task.add_done_callback(self._reap)
        return task

    def _reap(self, task: asyncio.Task) -> None:
        self._background.discard(task)
        if not task.cancelled():
            task.exception()  # failures are already recorded as spans

    async def invoke(self, target: NextSpec, env: InvocationEnvelope,
                     src_tier: str | None) -> ExecutionResult | None:
        self._check(target.tier)
        there = self.delays.get(src_tier, target.tier)
        back = self.delays.get(target.tier, src_tier) if src_tier is not None else 0.0
        if env.sync is SyncMode.SYNC:
            async def round_trip():
                await self.clock.sleep(there)
                result = await self.runtime.execute(env, target.tier)
                await self.clock.sleep(back)
                return result
            try:
                return await self.clock.wait_for(round_trip(), self.timeout_ms)
            except asyncio.TimeoutError:
                raise InvokeTimeout(target.tier, self.timeout_ms) from None
        await self.clock.sleep(there)
        if not self.runtime.serves(env.workflow, env.function, target.tier):
            raise UnknownFunction(env.function)
        self._spawn(self.runtime.execute(env, target.tier))
        await self.clock.sleep(back)
        return None

    async def submit(self, env: InvocationEnvelope, tier: str) -> ExecutionResult | None:
        """Entry dispatch from a co-located client: no network leg, no Comm span."""
        return await self.invoke(NextSpec(env.function, tier), env, None)

    async def drain(self) -> None:
        while self._background:
            await asyncio.gather(*list(self._background), return_exceptions=True)

    @property
    def pending(self) -> int:
        return len(self._background)


class HttpInvoker:
    """Invokes functions on remote tiers through their gateways."""

    def __init__(self, tier_urls: Mapping[str, str], timeout_ms: float = DEFAULT_SYNC_TIMEOUT_MS):
        self.tier_urls = {k: v.rstrip("/") for k, v in tier_urls.items()}
        self.timeout_ms = timeout_ms
        self._session: aiohttp.ClientSession | None = None

    def bind(self, runtime: Runtime) -> HttpInvoker:
        return self

    def network_ms(self, src: str | None, dst: str) -> None:
        return None

    def _client(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(connector=aiohttp.TCPConnector(limit=0))
        return self._session

    async def invoke(self, target: NextSpec, env: InvocationEnvelope,
                     src_tier: str | None) -> ExecutionResult | None:
        base = self.tier_urls.get(target.tier)
        if base is None:
            raise TierUnreachable(target.tier, "no URL configured")
        url = f"{base}/function/{target.function}"
        try:
            async with self._client().post(
                    url, json=env.to_dict(),
                    timeout=aiohttp.ClientTimeout(total=self.timeout_ms / 1000.0)) as resp:
                status = resp.status
                body = await resp.json(content_type=None)
        except asyncio.TimeoutError:
            raise InvokeTimeout(target.tier, self.timeout_ms) from None
        except (aiohttp.ClientError, json.JSONDecodeError) as exc:
            raise TierUnreachable(target.tier, exc) from exc
        if status == 200:
            return ExecutionResult(body["request_id"], list(body["outputs"]), [],
                                   float(body["end_to_end_ms"]))
        if status == 202:
            return None
        if status == 404:
            raise UnknownFunction(target.function)
        if status == 504:
            raise InvokeTimeout(target.tier, self.timeout_ms)
        raise DownstreamFailure(target.function, target.tier, body.get("error") if isinstance(body, dict) else body)

    async def submit(self, env: InvocationEnvelope, tier: str) -> ExecutionResult | None:
        return await self.invoke(NextSpec(env.function, tier), env, None)

    async def fetch_spans(self, tier: str) -> list[dict[str, Any]]:
        async with self._client().get(f"{self.tier_urls[tier]}/metrics") as resp:
            return await resp.json()

    async def drain(self) -> None:
        pass

    async def close(self) -> None:
        if self._session is not None:
            await self._session.close()


# -- HTTP service ------------------------------------------------------------


def _error(status: int, message: str) -> web.Response:
    return web.json_response({"error": message}, status=status)


class GatewayService:
    """HTTP front of one tier: function invocation, data service, metrics."""

    def __init__(self, tier: TierDescriptor, runtime: Runtime, collector: Collector | None = None):
        self.tier = tier
        self.runtime = runtime
        self.collector = collector or runtime.collector
        self.objects = MemoryBackend()
        self.queues = QueueBackend()
        self._tasks: set[asyncio.Task] = set()
        self._runner: web.AppRunner | None = None
        self.url: str | None = None
        self.app = web.Application(client_max_size=1 << 30)
        self.app.add_routes([
            web.get("/healthz", self.healthz),
            web.get("/metrics", self.metrics),
            web.post("/function/{name}", self.function),
            web.put("/data/{key:.+}", self.put_data),
            web.get("/data/{key:.+}", self.get_data),
            web.post("/queue/{key:.+}", self.append_queue),
            web.delete("/queue/{key:.+}", self.pop_queue),
        ])

    # handlers

    async def healthz(self, request: web.Request) -> web.Response:
        return web.Response(text="ok")

    async def metrics(self, request: web.Request) -> web.Response:
        return web.json_response([s.to_dict() for s in self.collector.snapshot()])

    async def function(self, request: web.Request) -> web.Response:
        name = request.match_info["name"]
        try:
            env = InvocationEnvelope.from_dict(await request.json())
        except (ValueError, KeyError, TypeError, EdgeflowError) as exc:
            return _error(422, f"invalid envelope: {exc}")
        if env.function != name:
            return _error(422, f"envelope names {env.function!r}, path names {name!r}")
        if not self.runtime.serves(env.workflow, name, self.tier.name):
            return _error(404, f"function {name!r} is not served on tier {self.tier.name!r}")
        if env.sync is SyncMode.ASYNC:
            task = asyncio.ensure_future(self.runtime.execute(env, self.tier.name))
            self._tasks.add(task)
            task.add_done_callback(self._reap)
            return web.json_response({"request_id": env.request_id}, status=202)
        try:
            result = await self.runtime.execute(env, self.tier.name)
        except InvokeTimeout as exc:
            return _error(504, str(exc))
        except UnknownFunction as exc:
            return _error(404, str(exc))
        except EdgeflowError as exc:
            return _error(500, str(exc))
        return web.json_response({"request_id": result.request_id,
                                  "end_to_end_ms": result.end_to_end_ms,
                                  "outputs": result.outputs})

    def _reap(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled():
            task.exception()

    async def put_data(self, request: web.Request) -> web.Response:
        key = unquote(request.match_info["key"])
        size = self.objects.store(key, DataObject(key, await request.read()))
        return web.json_response({"size": size})

    async def get_data(self, request: web.Request) -> web.Response:
        key = unquote(request.match_info["key"])
        try:
            obj = self.objects.load(key)
        except NotFound:
            return _error(404, f"no object {key!r}")
        return web.Response(body=obj.data, content_type="application/octet-stream")

    async def append_queue(self, request: web.Request) -> web.Response:
        key = unquote(request.match_info["key"])
        size = self.queues.store(key, DataObject(key, await request.read()))
        return web.json_response({"size": size})

    async def pop_queue(self, request: web.Request) -> web.Response:
        key = unquote(request.match_info["key"])
        try:
            obj = self.queues.load(key)
        except NotFound:
            return _error(404, f"queue {key!r} is empty")
        return web.Response(body=obj.data, content_type="application/octet-stream")

    # lifecycle

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> str:
        self._runner = web.AppRunner(self.app, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, host, port)
        try:
            await site.start()
        except OSError as exc:
            await self._runner.cleanup()
            raise BindError(f"{host}:{port}", exc) from exc
        bound = site._server.sockets[0].getsockname()[1]
        self.url = f"http://{host}:{bound}"
        return self.url

    async def stop(self) -> None:
        """Drain in-flight async invocations, then close the listener."""
        while self._tasks:
            await asyncio.gather(*list(self._tasks), return_exceptions=True)
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None


async def serve(tier: TierDescriptor, runtime: Runtime, host: str = "127.0.0.1",
                port: int = 0) -> GatewayService:
    """Validate the runtime and start a gateway; returns the running service."""
    runtime.validate()
    service = GatewayService(tier, runtime)
    await service.start(host, port)
    return service
