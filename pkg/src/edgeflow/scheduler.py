"""Load generation: closed-loop streams and cron bursts.

Both drivers only need an object with ``submit(env, tier)`` (the
``LocalInvoker`` for simulation, ``HttpInvoker`` against live gateways)
and a clock. Request ids are derived from the seed and the request's
position in the schedule, so a simulated run and a real run of the same
scenario name their requests identically.
"""

from __future__ import annotations

import asyncio
import math
from dataclasses import dataclass, field
from enum import Enum

from .graph import WorkflowGraph
from .runtime import InvocationEnvelope, derive_id


class LoadMode(str, Enum):
    CLOSED = "closed"
    CRON = "cron"


@dataclass(frozen=True)
class LoadProfile:
    mode: LoadMode
    duration_ms: float
    concurrency: int = 1
    seed: int = 0
    max_requests: int | None = None  # per run; closed loop stops issuing once reached

    def __post_init__(self):
        object.__setattr__(self, "mode", LoadMode(self.mode))
        if not self.duration_ms > 0:
            raise ValueError(f"duration must be > 0, got {self.duration_ms}")
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be >= 1, got {self.concurrency}")
        if self.max_requests is not None and self.max_requests < 1:
            raise ValueError("max_requests must be >= 1")


@dataclass
class LoadStats:
    workflow: str
    issued: int = 0
    completed: int = 0
    failed: int = 0
    inflight: int = 0
    max_inflight: int = 0
    request_ids: list[str] = field(default_factory=list)
    firing_times_ms: list[float] = field(default_factory=list)
    errors: dict[str, int] = field(default_factory=dict)

    def _start(self, rid: str) -> None:
        self.issued += 1
        self.request_ids.append(rid)
        self.inflight += 1
        self.max_inflight = max(self.max_inflight, self.inflight)

    def _finish(self, error: BaseException | None) -> None:
        self.inflight -= 1
        if error is None:
            self.completed += 1
        else:
            self.failed += 1
            name = type(error).__name__
            self.errors[name] = self.errors.get(name, 0) + 1

    def to_dict(self) -> dict:
        return {"workflow": self.workflow, "issued": self.issued, "completed": self.completed,
                "failed": self.failed, "max_inflight": self.max_inflight,
                "firings": len(self.firing_times_ms), "errors": dict(sorted(self.errors.items()))}


def cron_firing_times(period_ms: float, duration_ms: float) -> list[float]:
    """Firings at 0, p, 2p, ... strictly before the end of the run."""
    return [k * period_ms for k in range(math.ceil(duration_ms / period_ms))]


async def _one(invoker, g: WorkflowGraph, rid: str, now_ms: float, stats: LoadStats) -> None:
    entry = g.entry_template
    env = InvocationEnvelope.entry(g.workflow_name, entry.name, rid, entry.sync, now_ms)
    stats._start(rid)
    error = None
    try:
        await invoker.submit(env, entry.tier)
    except asyncio.CancelledError:
        raise
    except Exception as exc:  # failures are counted, never abort the run
        error = exc
    stats._finish(error)


async def run_closed_loop(g: WorkflowGraph, profile: LoadProfile, invoker, clock) -> LoadStats:
    """Keep ``concurrency`` entry requests in flight until the duration elapses.

    Each stream issues its next request as soon as the previous one
    returns. Requests still running at the deadline are allowed to finish.
    """
    stats = LoadStats(g.workflow_name)
    t0 = clock.now_ms()
    budget = [profile.max_requests]

    def take() -> bool:
        if budget[0] is None:
            return True
        if budget[0] <= 0:
            return False
        budget[0] -= 1
        return True

    async def stream(s: int) -> None:
        k = 0
        while clock.now_ms() - t0 < profile.duration_ms and take():
            rid = derive_id("request", profile.seed, g.workflow_name, s, k)
            await _one(invoker, g, rid, clock.now_ms(), stats)
            k += 1

    await asyncio.gather(*(stream(s) for s in range(profile.concurrency)))
    await invoker.drain()
    return stats


async def run_cron(g: WorkflowGraph, profile: LoadProfile, invoker, clock) -> LoadStats:
    """Fire ``burst`` concurrent entry requests at every period boundary.

    Firing times are anchored to the start of the run, so a slow firing
    never delays the next one; overlapping firings are allowed.
    """
    cron = g.entry_template.cron
    if cron is None:
        raise ValueError(f"workflow {g.workflow_name!r} has no cron entry")
    stats = LoadStats(g.workflow_name)
    t0 = clock.now_ms()
    tasks = []
    for k, offset in enumerate(cron_firing_times(cron.period_ms, profile.duration_ms)):
        await clock.sleep(t0 + offset - clock.now_ms())
        stats.firing_times_ms.append(clock.now_ms() - t0)
        for b in range(cron.burst):
            rid = derive_id("request", profile.seed, g.workflow_name, "cron", k, b)
            tasks.append(asyncio.ensure_future(_one(invoker, g, rid, clock.now_ms(), stats)))
    await asyncio.gather(*tasks)
    await invoker.drain()
    return stats


async def run_load(g: WorkflowGraph, profile: LoadProfile, invoker, clock) -> LoadStats:
    if profile.mode is LoadMode.CRON:
        return await run_cron(g, profile, invoker, clock)
    return await run_closed_loop(g, profile, invoker, clock)
