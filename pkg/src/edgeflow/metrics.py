"""Span collection, percentile math, request joins, and run reports."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySamples


class SpanKind(str, Enum):
    HANDLER = "handler"
    LOAD = "load"
    STORE = "store"
    COMM = "comm"


_KIND_ORDER = {k: i for i, k in enumerate(SpanKind)}


@dataclass(frozen=True)
class MetricSpan:
    kind: SpanKind
    workflow: str
    function: str
    tier: str
    request_id: str
    invocation_id: str
    start: float
    duration: float
    size: int | None = None
    failed: bool = False
    error: str | None = None
    labels: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", SpanKind(self.kind))
        if not self.duration >= 0:
            raise ValueError(f"span duration must be >= 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value, "workflow": self.workflow, "function": self.function,
            "tier": self.tier, "request_id": self.request_id, "invocation_id": self.invocation_id,
            "start": self.start, "duration": self.duration, "size": self.size,
            "failed": self.failed, "error": self.error, "labels": dict(self.labels),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricSpan:
        return cls(**{**d, "labels": dict(d.get("labels") or {})})


class Collector:
    """Concurrent-safe span sink.

    Holds up to ``capacity`` spans in memory; beyond that the buffer is
    spilled as JSON lines to ``spill_path`` (a temp file unless given).
    """

    def __init__(self, capacity: int = 1_000_000, spill_path: str | Path | None = None):
        self.capacity = capacity
        self._spill_path = Path(spill_path) if spill_path else None
        self._buffer: list[MetricSpan] = []
        self._spilled = 0
        self._lock = threading.Lock()

    def record(self, span: MetricSpan) -> None:
        with self._lock:
            self._buffer.append(span)
            if len(self._buffer) >= self.capacity:
                self._spill()

    __call__ = record

    def _spill(self) -> None:
        if self._spill_path is None:
            fd, name = tempfile.mkstemp(prefix="edgeflow-spans-", suffix=".jsonl")
            os.close(fd)
            self._spill_path = Path(name)
        with self._spill_path.open("a", encoding="utf-8") as fh:
            for s in self._buffer:
                fh.write(json.dumps(s.to_dict()) + "\n")
        self._spilled += len(self._buffer)
        self._buffer = []

    def snapshot(self) -> list[MetricSpan]:
        with self._lock:
            buffered = list(self._buffer)
            spilled = self._spilled
            path = self._spill_path
        spans = []
        if spilled and path is not None:
            with path.open(encoding="utf-8") as fh:
                spans = [MetricSpan.from_dict(json.loads(line)) for line in fh]
        return spans + buffered

    def __len__(self) -> int:
        with self._lock:
            return self._spilled + len(self._buffer)


def nearest_rank_index(n: int, pct: int = 95) -> int:
    """1-based rank ceil(pct/100 * n), in exact integer arithmetic."""
    return (pct * n + 99) // 100


def p95(samples: Sequence[float] | np.ndarray) -> float:
    """Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest sample."""
    arr = np.asarray(samples, dtype=float).ravel()
    if arr.size == 0:
        raise EmptySamples()
    k = nearest_rank_index(arr.size) - 1
    return float(np.partition(arr, k)[k])


# -- request joins -----------------------------------------------------------


@dataclass
class RequestJoin:
    end_to_end_ms: dict[str, float]
    incomplete: list[str]
    failed: list[str]
    invocations: dict[str, int]


def _is_complete(spans: list[MetricSpan]) -> bool:
    handlers = {s.invocation_id: s for s in spans if s.kind is SpanKind.HANDLER}
    if not any(s.labels.get("parent_id") is None for s in handlers.values()):
        return False
    comms_by_inv: dict[str, list[MetricSpan]] = defaultdict(list)
    for s in spans:
        if s.kind is SpanKind.COMM:
            comms_by_inv[s.invocation_id].append(s)
    for inv, h in handlers.items():
        comms = comms_by_inv.get(inv, [])
        if len(comms) < h.labels.get("fanout", 0):
            return False
        for c in comms:
            child = c.labels.get("child")
            if not c.failed and child not in handlers:
                return False
    return True


def end_to_end(spans: Iterable[MetricSpan]) -> RequestJoin:
    """Join spans by request id.

    A request's latency is last finish minus first start over its spans.
    Trees still missing an invocation (async tails) are reported as
    incomplete; trees with any failed span are reported as failed. Neither
    gets a latency.
    """
    by_request: dict[str, list[MetricSpan]] = defaultdict(list)
    for s in spans:
        by_request[s.request_id].append(s)
    e2e, incomplete, failed, invocations = {}, [], [], {}
    for rid in sorted(by_request):
        group = by_request[rid]
        invocations[rid] = sum(1 for s in group if s.kind is SpanKind.HANDLER)
        if any(s.failed for s in group):
            failed.append(rid)
        elif not _is_complete(group):
            incomplete.append(rid)
        else:
            e2e[rid] = max(s.end for s in group) - min(s.start for s in group)
    return RequestJoin(e2e, incomplete, failed, invocations)


# -- reports -----------------------------------------------------------------


def _num(x: float | None) -> float | None:
    return None if x is None else round(float(x), 6)


def _stats(durations: list[float]) -> tuple[float | None, float | None]:
    if not durations:
        return None, None
    return _num(sum(durations) / len(durations)), _num(p95(durations))


def build_report(
    spans: Iterable[MetricSpan],
    *,
    scenario: str = "",
    time_scale: float = 1.0,
    config: Mapping[str, Any] | None = None,
    autoscale: Iterable[Mapping[str, Any]] = (),
    workflow: str = "",
) -> dict[str, Any]:
    spans = list(spans)
    groups: dict[tuple[str, str, SpanKind], list[MetricSpan]] = defaultdict(list)
    for s in spans:
        groups[(s.function, s.tier, s.kind)].append(s)
    functions = []
    for (name, tier, kind) in sorted(groups, key=lambda g: (g[0], g[1], _KIND_ORDER[g[2]])):
        group = groups[(name, tier, kind)]
        ok = [s.duration for s in group if not s.failed]
        mean, pct = _stats(ok)
        functions.append({
            "name": name, "tier": tier, "kind": kind.value, "count": len(group),
            "failures": len(group) - len(ok), "mean_ms": mean, "p95_ms": pct,
        })
    join = end_to_end(spans)
    latencies = list(join.end_to_end_ms.values())
    mean, pct = _stats(latencies)
    return {
        "scenario": scenario,
        "time_scale": time_scale,
        "config": dict(config or {}),
        "functions": functions,
        "workflow": {
            "name": workflow,
            "requests": len(join.invocations),
            "complete": len(latencies),
            "incomplete": len(join.incomplete),
            "failed": len(join.failed),
            "mean_end_to_end_ms": mean,
            "p95_end_to_end_ms": pct,
            "incomplete_ids": join.incomplete,
        },
        "autoscale": [dict(a) for a in autoscale],
    }


CSV_FIELDS = ["scope", "name", "tier", "kind", "count", "failures", "mean_ms", "p95_ms"]


def emit_report(report: Mapping[str, Any], format: str = "json") -> str:
    if format == "json":
        return json.dumps(report, indent=2) + "\n"
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    cell = lambda v: "" if v is None else v  # noqa: E731
    for f in report["functions"]:
        writer.writerow(["function", f["name"], f["tier"], f["kind"], f["count"], f["failures"],
                         cell(f["mean_ms"]), cell(f["p95_ms"])])
    wf = report["workflow"]
    writer.writerow(["workflow", wf["name"], "", "end_to_end", wf["complete"], wf["failed"],
                     cell(wf["mean_end_to_end_ms"]), cell(wf["p95_end_to_end_ms"])])
    return buf.getvalue()
