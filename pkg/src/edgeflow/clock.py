"""Time sources for real and simulated runs.

Both clocks expose the same async surface, so the runtime, invokers, and
scheduler are written once. ``SimClock`` drives a ``VirtualTimeLoop``: an
asyncio loop whose clock (in milliseconds) jumps straight to the next
timer whenever every task is blocked, which makes a seeded run
bit-for-bit repeatable and independent of host speed.
"""

from __future__ import annotations

import asyncio
import selectors
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Awaitable, Callable, Coroutine, TypeVar

T = TypeVar("T")


class SimulationDeadlock(RuntimeError):
    pass


class _VirtualSelector(selectors.BaseSelector):
    """Selector that never waits on I/O; a timeout advances virtual time."""

    def __init__(self):
        self._map: dict[int, selectors.SelectorKey] = {}
        self.loop: VirtualTimeLoop | None = None

    @staticmethod
    def _fd(fileobj) -> int:
        return fileobj if isinstance(fileobj, int) else fileobj.fileno()

    def register(self, fileobj, events, data=None):
        key = selectors.SelectorKey(fileobj, self._fd(fileobj), events, data)
        self._map[key.fd] = key
        return key

    def unregister(self, fileobj):
        return self._map.pop(self._fd(fileobj))

    def select(self, timeout=None):
        if timeout is None:
            raise SimulationDeadlock("every task is waiting and no timer is pending")
        if timeout > 0:
            self.loop._advance(timeout)
        return []

    def get_map(self):
        return self._map

    def close(self):
        self._map.clear()


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop on a virtual clock measured in milliseconds from 0."""

    def __init__(self):
        self._virtual_now = 0.0
        selector = _VirtualSelector()
        super().__init__(selector=selector)
        selector.loop = self

    def time(self) -> float:
        return self._virtual_now

    def _advance(self, timeout: float) -> None:
        # land exactly on the next timer instead of now + (when - now)
        scheduled = self._scheduled  # heap of TimerHandle maintained by BaseEventLoop
        if scheduled and scheduled[0].when() - self._virtual_now <= timeout:
            self._virtual_now = scheduled[0].when()
        else:
            self._virtual_now += timeout


def _spin(ms: float) -> None:
    end = time.perf_counter() + ms / 1000.0
    while time.perf_counter() < end:
        pass


class RealClock:
    """Wall-clock time; compute cost is a busy-wait on a worker thread."""

    simulated = False

    def __init__(self, max_workers: int = 128):
        self._executor = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="edgeflow")

    def now_ms(self) -> float:
        return time.time() * 1000.0

    async def sleep(self, ms: float) -> None:
        await asyncio.sleep(max(0.0, ms) / 1000.0)

    async def compute(self, ms: float) -> None:
        if ms > 0:
            await asyncio.get_running_loop().run_in_executor(self._executor, _spin, ms)

    async def wait_for(self, aw: Awaitable[T], timeout_ms: float | None) -> T:
        return await asyncio.wait_for(aw, None if timeout_ms is None else timeout_ms / 1000.0)

    async def run_blocking(self, fn: Callable[..., T], *args: Any) -> T:
        return await asyncio.get_running_loop().run_in_executor(self._executor, fn, *args)

    def run(self, coro: Coroutine[Any, Any, T]) -> T:
        return asyncio.run(coro)

    def close(self) -> None:
        self._executor.shutdown(wait=False)


class SimClock:
    """Virtual milliseconds. Only valid inside ``run`` (a VirtualTimeLoop)."""

    simulated = True

    def __init__(self):
        self._loop: VirtualTimeLoop | None = None

    def now_ms(self) -> float:
        return self._loop.time() if self._loop is not None else 0.0

    async def sleep(self, ms: float) -> None:
        if ms > 0:
            await asyncio.sleep(ms)
        else:
            await asyncio.sleep(0)

    compute = sleep

    async def wait_for(self, aw: Awaitable[T], timeout_ms: float | None) -> T:
        return await asyncio.wait_for(aw, timeout_ms)

    async def run_blocking(self, fn: Callable[..., T], *args: Any) -> T:
        return fn(*args)

    def run(self, coro: Coroutine[Any, Any, T]) -> T:
        loop = VirtualTimeLoop()
        self._loop = loop
        try:
            return loop.run_until_complete(coro)
        finally:
            try:
                _cancel_pending(loop)
            finally:
                loop.close()

    def close(self) -> None:
        pass


def _cancel_pending(loop: asyncio.AbstractEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for t in pending:
        t.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
