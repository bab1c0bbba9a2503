import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeflow.graph import build_graph
from edgeflow.runtime import AutoscalePolicy
from edgeflow.scheduler import LoadMode, LoadProfile, cron_firing_times, run_load
from edgeflow.template import CronSpec, FunctionTemplate, OutputSpec

from helpers import SimHarness, chain, ref


def cron_graph(period_ms, burst, cost=1.0):
    g = build_graph("tick", [FunctionTemplate("tick", "edge", "h.s0", outputs=(OutputSpec(ref("memory://d0")),),
                                              cron=CronSpec(period_ms, burst))])
    _, handlers = chain([cost], ["edge"])
    return g, handlers


def drive(g, handlers, profile, **kw):
    sim = SimHarness(g, handlers, **kw)
    stats = sim.run(lambda: run_load(g, profile, sim.invoker, sim.clock))
    return stats, sim


class TestProfile:
    @pytest.mark.parametrize("kwargs", [dict(duration_ms=0), dict(duration_ms=-5),
                                        dict(duration_ms=10, concurrency=0),
                                        dict(duration_ms=10, max_requests=0)])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            LoadProfile(LoadMode.CLOSED, **kwargs)

    def test_mode_from_string(self):
        assert LoadProfile("cron", 1000).mode is LoadMode.CRON


class TestCronTimes:
    def test_thirty_seconds_every_three(self):
        assert cron_firing_times(3000, 30_000) == [k * 3000 for k in range(10)]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10_000), st.integers(1, 1_000_000))
    def test_all_times_inside_run(self, p, d):
        times = cron_firing_times(p, d)
        assert times[0] == 0 and all(t < d for t in times)
        assert times[-1] + p >= d


class TestClosedLoop:
    def test_single_stream_rate(self):
        g, handlers = chain([10], ["edge"])
        stats, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 1000, concurrency=1))
        assert stats.issued == stats.completed == 100
        assert stats.max_inflight == 1

    def test_concurrency_gauge(self):
        g, handlers = chain([10], ["edge"])
        stats, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 100, concurrency=50),
                         policy=AutoscalePolicy(min_replicas=50, max_replicas=50))
        assert stats.max_inflight == 50
        assert stats.issued == 500

    def test_request_budget(self):
        g, handlers = chain([10], ["edge"])
        stats, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 10_000, concurrency=4, max_requests=7))
        assert stats.issued == 7

    def test_failures_are_counted_not_fatal(self):
        g, _ = chain([10], ["edge"])
        from edgeflow.runtime import HandlerRegistry
        bad = HandlerRegistry()
        bad.register("h.s0", lambda i, c: 1 / 0, 10)
        stats, _ = drive(g, bad, LoadProfile(LoadMode.CLOSED, 100, concurrency=2))
        assert stats.failed == stats.issued == 20
        assert stats.errors == {"HandlerPanic": 20}

    def test_ids_depend_on_seed(self):
        g, handlers = chain([10], ["edge"])
        a, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 50, seed=1))
        b, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 50, seed=1))
        c, _ = drive(g, handlers, LoadProfile(LoadMode.CLOSED, 50, seed=2))
        assert a.request_ids == b.request_ids != c.request_ids


class TestCron:
    def test_burst_count(self):
        g, handlers = cron_graph(3000, 20)
        stats, _ = drive(g, handlers, LoadProfile(LoadMode.CRON, 30_000))
        assert stats.issued == stats.completed == 200 and len(set(stats.request_ids)) == 200
        assert stats.firing_times_ms == [k * 3000 for k in range(10)]

    def test_overlapping_firings(self):
        # each request outlives the period; firings must stay on schedule anyway
        g, handlers = cron_graph(1000, 2, cost=2500)
        stats, sim = drive(g, handlers, LoadProfile(LoadMode.CRON, 5000),
                           policy=AutoscalePolicy(min_replicas=100, max_replicas=100))
        assert stats.firing_times_ms == [0, 1000, 2000, 3000, 4000]
        assert stats.max_inflight == 6
        assert stats.completed == 10

    def test_non_cron_entry_rejected(self):
        g, handlers = chain([1], ["edge"])
        with pytest.raises(ValueError):
            drive(g, handlers, LoadProfile(LoadMode.CRON, 1000))
