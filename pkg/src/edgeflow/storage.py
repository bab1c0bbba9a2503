"""Pluggable data backends behind a uniform load/store interface.

Object backends keep the latest value per key; queue backends append on
store and pop the oldest entry on load. Templates name a backend by its
registry name (``minio://frames``), so swapping a backend is a registry
change, not a template change.
"""

from __future__ import annotations

import os
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple
from urllib.parse import quote

import httpx

from .errors import BackendUnavailable, CapacityExceeded, NotFound, UnknownBackend
from .metrics import MetricSpan, SpanKind
from .template import StorageRef

OBJECT = "object"
QUEUE = "queue"

DEFAULT_MEMORY_BUDGET = 256 * 1024 * 1024


def wall_ms() -> float:
    return time.time() * 1000.0


@dataclass(frozen=True)
class DataObject:
    key: str
    data: bytes
    created_at: float = field(default_factory=wall_ms)

    def __post_init__(self):
        if not self.key:
            raise ValueError("DataObject key must be non-empty")
        object.__setattr__(self, "data", bytes(self.data))

    @property
    def size(self) -> int:
        return len(self.data)


class Backend(ABC):
    kind: str = OBJECT
    #: True when calls do real I/O and should leave the event loop thread.
    blocking: bool = False

    @abstractmethod
    def store(self, key: str, obj: DataObject) -> int: ...

    @abstractmethod
    def load(self, key: str) -> DataObject: ...


class MemoryBackend(Backend):
    def __init__(self, budget: int = DEFAULT_MEMORY_BUDGET):
        self.budget = budget
        self.used = 0
        self._objects: dict[str, DataObject] = {}
        self._lock = threading.Lock()

    def store(self, key, obj):
        with self._lock:
            old = self._objects.get(key)
            after = self.used - (old.size if old else 0) + obj.size
            if after > self.budget:
                raise CapacityExceeded(self.budget, obj.size)
            self._objects[key] = obj
            self.used = after
        return obj.size

    def load(self, key):
        with self._lock:
            try:
                return self._objects[key]
            except KeyError:
                raise NotFound(key) from None

    def keys(self) -> list[str]:
        with self._lock:
            return list(self._objects)


class FileBackend(Backend):
    blocking = True

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / quote(key, safe="")

    def store(self, key, obj):
        path = self._path(key)
        tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
        tmp.write_bytes(obj.data)
        with self._lock:
            os.replace(tmp, path)
        return obj.size

    def load(self, key):
        path = self._path(key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(key) from None
        return DataObject(key, data, path.stat().st_mtime_ns / 1e6)


class QueueBackend(Backend):
    """Per-key FIFO; load is a destructive, non-blocking pop."""

    kind = QUEUE

    def __init__(self):
        self._queues: dict[str, deque[DataObject]] = {}
        self._lock = threading.Lock()

    def store(self, key, obj):
        with self._lock:
            self._queues.setdefault(key, deque()).append(obj)
        return obj.size

    def load(self, key):
        with self._lock:
            q = self._queues.get(key)
            if not q:
                raise NotFound(key)
            return q.popleft()

    def depth(self, key: str) -> int:
        with self._lock:
            return len(self._queues.get(key, ()))


class RemoteBackend(Backend):
    """Client for the gateway's data service (``/data/{key}`` or ``/queue/{key}``)."""

    blocking = True

    def __init__(self, base_url: str, kind: str = OBJECT, timeout_s: float = 10.0, name: str = "remote"):
        self.base_url = base_url.rstrip("/")
        self.kind = kind
        self.name = name
        self._client = httpx.Client(timeout=timeout_s)

    def _url(self, key: str) -> str:
        prefix = "data" if self.kind == OBJECT else "queue"
        return f"{self.base_url}/{prefix}/{quote(key, safe='')}"

    def _request(self, method: str, key: str, content: bytes | None = None) -> httpx.Response:
        try:
            return self._client.request(method, self._url(key), content=content)
        except httpx.HTTPError as exc:
            raise BackendUnavailable(self.name, exc) from exc

    def store(self, key, obj):
        resp = self._request("PUT" if self.kind == OBJECT else "POST", key, obj.data)
        if resp.status_code != 200:
            raise BackendUnavailable(self.name, f"HTTP {resp.status_code}")
        return int(resp.json()["size"])

    def load(self, key):
        resp = self._request("GET" if self.kind == OBJECT else "DELETE", key)
        if resp.status_code == 404:
            raise NotFound(key)
        if resp.status_code != 200:
            raise BackendUnavailable(self.name, f"HTTP {resp.status_code}")
        return DataObject(key, resp.content)

    def close(self) -> None:
        self._client.close()


class BackendRegistry:
    def __init__(self, backends: dict[str, Backend] | None = None):
        self._entries: dict[str, Backend] = {}
        for name, backend in (backends or {}).items():
            self.register(name, backend)

    def register(self, name: str, backend: Backend, replace: bool = False) -> None:
        if name in self._entries and not replace:
            raise ValueError(f"backend {name!r} already registered")
        self._entries[name] = backend

    def get(self, name: str) -> Backend:
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownBackend(name) from None

    def kind(self, name: str) -> str:
        return self.get(name).kind

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)


def default_registry(file_root: str | Path | None = None) -> BackendRegistry:
    """Memory, queue, and file backends plus the role names used in shipped bundles."""
    reg = BackendRegistry({"memory": MemoryBackend(), "queue": QueueBackend(),
                           "minio": MemoryBackend(), "s3": MemoryBackend(), "kafka": QueueBackend()})
    if file_root is not None:
        reg.register("file", FileBackend(file_root))
    return reg


def store(registry: BackendRegistry, ref: StorageRef, obj: DataObject) -> int:
    return registry.get(ref.backend).store(ref.key, obj)


def load(registry: BackendRegistry, ref: StorageRef) -> DataObject:
    return registry.get(ref.backend).load(ref.key)


class Timed(NamedTuple):
    result: object
    duration_ms: float
    span: MetricSpan


def _timed(kind, op, registry, ref, obj, now, emit, fields) -> Timed:
    t0 = now()
    try:
        result = op()
    except Exception as exc:
        t1 = now()
        span = MetricSpan(kind=kind, start=t0, duration=max(0.0, t1 - t0), failed=True,
                          error=type(exc).__name__, size=obj.size if obj is not None else None,
                          labels={"ref": str(ref)}, **fields)
        if emit:
            emit(span)
        raise
    t1 = now()
    size = result if kind is SpanKind.STORE else result.size
    span = MetricSpan(kind=kind, start=t0, duration=max(0.0, t1 - t0), size=size,
                      labels={"ref": str(ref)}, **fields)
    if emit:
        emit(span)
    return Timed(result, span.duration, span)


_SPAN_DEFAULTS = {"workflow": "", "function": "", "tier": "", "request_id": "", "invocation_id": ""}


def timed_store(registry: BackendRegistry, ref: StorageRef, obj: DataObject, *,
                now: Callable[[], float] = wall_ms,
                emit: Callable[[MetricSpan], None] | None = None, **span_fields) -> Timed:
    """``store`` plus a Store span; failures emit a failed span and re-raise."""
    fields = {**_SPAN_DEFAULTS, **span_fields}
    return _timed(SpanKind.STORE, lambda: store(registry, ref, obj), registry, ref, obj, now, emit, fields)


def timed_load(registry: BackendRegistry, ref: StorageRef, *,
               now: Callable[[], float] = wall_ms,
               emit: Callable[[MetricSpan], None] | None = None, **span_fields) -> Timed:
    fields = {**_SPAN_DEFAULTS, **span_fields}
    return _timed(SpanKind.LOAD, lambda: load(registry, ref), registry, ref, None, now, emit, fields)
