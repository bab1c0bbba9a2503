import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeflow.errors import (
    DownstreamFailure,
    DuplicateHandler,
    HandlerPanic,
    InputMissing,
    NoBranchMatch,
    StartupValidation,
)
from edgeflow.gateway import DelayMatrix
from edgeflow.graph import build_graph
from edgeflow.metrics import end_to_end
from edgeflow.runtime import (
    AutoscalePolicy,
    Handler,
    HandlerRegistry,
    InvocationEnvelope,
    autoscale_tick,
    autoscale_trace,
    derive_id,
)
from edgeflow.template import FunctionTemplate, OutputSpec, SyncMode

from helpers import TIERS, SimHarness, branching, chain, ref


class TestEnvelope:
    def test_wire_round_trip(self):
        env = InvocationEnvelope.entry("w", "f", "r1", SyncMode.ASYNC, 12.0)
        child = env.child("g", 0, ["memory://x/1"], SyncMode.SYNC, 15.0)
        assert InvocationEnvelope.from_dict(child.to_dict()) == child
        assert child.parent_id == env.invocation_id and child.hop == 1

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("hop"),
        lambda d: d.update(extra=1),
        lambda d: d.update(version=2),
        lambda d: d.update(hop="1"),
        lambda d: d.update(data_keys=["not a ref"]),
        lambda d: d.update(workflow=""),
    ])
    def test_strict_decoding(self, mutate):
        d = InvocationEnvelope.entry("w", "f", "r", SyncMode.SYNC, 0).to_dict()
        mutate(d)
        with pytest.raises(ValueError):
            InvocationEnvelope.from_dict(d)

    def test_derived_ids_are_stable(self):
        assert derive_id("request", 1, "w", 0, 3) == derive_id("request", 1, "w", 0, 3)
        assert derive_id("a", 1) != derive_id("a", 2)


class TestRegistry:
    def test_duplicate_handler(self):
        h = HandlerRegistry()
        h.register("a", lambda i, c: [])
        with pytest.raises(DuplicateHandler):
            h.register("a", lambda i, c: [])

    def test_startup_validation_lists_every_problem(self):
        g, handlers = chain([1, 1], ["edge", "edge"], backend="nowhere")
        sim = SimHarness(g, HandlerRegistry())
        problems = sim.runtime.problems()
        assert sum("unregistered handler" in p for p in problems) == 2
        assert any("unknown backend" in p for p in problems)
        with pytest.raises(StartupValidation):
            sim.runtime.validate()


class TestSyncChain:
    def test_additivity(self):
        g, handlers = chain([10, 20, 30], ["edge", "edge", "cloud"])
        delays = DelayMatrix.symmetric(TIERS, {("edge", "cloud"): 20})
        sim = SimHarness(g, handlers, delays=delays)
        [result] = sim.run_requests(g, ["r"])
        assert result.end_to_end_ms == 100
        assert end_to_end(sim.spans()).end_to_end_ms == {"r": 100}

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=5),
           st.lists(st.sampled_from(TIERS), min_size=5, max_size=5),
           st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
    def test_sum_of_costs_and_round_trips(self, costs, tiers, ie, ic, ec):
        tiers = tiers[:len(costs)]
        speeds = {"iot": 0.5, "edge": 1.0, "cloud": 2.0}
        delays = DelayMatrix.symmetric(TIERS, {("iot", "edge"): ie, ("iot", "cloud"): ic, ("edge", "cloud"): ec})
        g, handlers = chain(costs, tiers)
        sim = SimHarness(g, handlers, delays=delays, speeds=speeds)
        [result] = sim.run_requests(g, ["r"])
        expected = sum(c / speeds[t] for c, t in zip(costs, tiers))
        expected += sum(2 * delays.get(a, b) for a, b in zip(tiers, tiers[1:]))
        assert math.isclose(result.end_to_end_ms, expected, abs_tol=1e-9)

    def test_spans_per_invocation(self):
        g, handlers = chain([1, 2, 3], ["iot", "edge", "cloud"])
        sim = SimHarness(g, handlers)
        sim.run_requests(g, [f"r{i}" for i in range(5)])
        assert len(sim.spans("handler")) == 15
        assert len(sim.spans("comm")) == 10
        assert len(sim.spans("store")) == 15
        # the entry reads nothing; every other stage loads its forwarded input
        assert len(sim.spans("load")) == 10

    def test_forwarded_keys_do_not_collide(self):
        def echo_rid(inputs, ctx):
            return [("d0", ctx.request_id.encode())]

        def read(inputs, ctx):
            ctx.labels["seen"] = inputs[0].data.decode()
            return [("d1", b"")]

        g, _ = chain([1, 1], ["edge", "edge"])
        handlers = HandlerRegistry()
        handlers.register("h.s0", Handler(echo_rid, 5))
        handlers.register("h.s1", Handler(read, 1))
        sim = SimHarness(g, handlers)
        sim.run_requests(g, [f"r{i}" for i in range(20)])
        seen = {s.request_id: s.labels["seen"] for s in sim.spans("handler") if s.function == "s1"}
        assert seen == {f"r{i}": f"r{i}" for i in range(20)}


class TestAsync:
    def test_async_chain_completes_after_drain(self):
        g, handlers = chain([5, 5, 5], ["edge", "cloud", "edge"], sync=SyncMode.ASYNC)
        sim = SimHarness(g, handlers, delays=DelayMatrix.symmetric(TIERS, default=10))
        results = sim.run_requests(g, ["a", "b"])
        assert results == [None, None]
        join = end_to_end(sim.spans())
        assert join.incomplete == [] and set(join.end_to_end_ms) == {"a", "b"}
        # 15 ms compute + 2 x 10 ms request legs, plus the ack leg of the last call
        assert join.end_to_end_ms["a"] == 40
        last = max(s.start + s.duration for s in sim.spans("handler") if s.request_id == "a")
        assert last == 35


class TestBranching:
    def test_exactly_one_branch(self):
        g, handlers = branching()
        sim = SimHarness(g, handlers, seed=3)
        sim.run_requests(g, [f"r{i}" for i in range(200)])
        fired = {}
        for s in sim.spans("handler"):
            if s.function != "decide":
                fired.setdefault(s.request_id, []).append(s.function)
        assert all(len(v) == 1 for v in fired.values()) and len(fired) == 200
        assert {v[0] for v in fired.values()} == {"go-left", "go-right"}

    def test_undeclared_name(self):
        g, _ = branching()
        handlers = HandlerRegistry()
        handlers.register("h.decide", lambda i, c: [("middle", b"")])
        handlers.register("h.left", lambda i, c: [])
        handlers.register("h.right", lambda i, c: [])
        sim = SimHarness(g, handlers)
        [err] = sim.run_requests(g, ["r"])
        assert isinstance(err, NoBranchMatch)
        [span] = sim.spans("handler")
        assert span.failed and span.error == "NoBranchMatch"


class TestFailures:
    def test_handler_panic_propagates_upstream(self):
        g, handlers = chain([1, 1], ["edge", "cloud"])
        bad = HandlerRegistry()
        bad.register("h.s0", handlers["h.s0"])
        bad.register("h.s1", lambda i, c: 1 / 0)
        sim = SimHarness(g, bad)
        [err] = sim.run_requests(g, ["r"])
        assert isinstance(err, DownstreamFailure)
        assert isinstance(err.__cause__, HandlerPanic)
        assert end_to_end(sim.spans()).failed == ["r"]

    def test_missing_input(self):
        g, handlers = chain([1], ["edge"])
        t = g.nodes["s0"]
        g = build_graph("chain", [FunctionTemplate("s0", "edge", "h.s0", inputs=(ref("memory://absent"),),
                                                   outputs=t.outputs)])
        sim = SimHarness(g, handlers)
        [err] = sim.run_requests(g, ["r"])
        assert isinstance(err, InputMissing)

    def test_optional_input_arrives_as_none(self):
        got = []

        def fn(inputs, ctx):
            got.append(inputs)
            return [("o", b"")]

        g = build_graph("w", [FunctionTemplate("f", "edge", "h.f",
                                               inputs=(ref("memory://a"), ref("memory://maybe")),
                                               outputs=(OutputSpec(ref("memory://o")),))])
        handlers = HandlerRegistry()
        handlers.register("h.f", Handler(fn, 1, frozenset({0, 1})))
        sim = SimHarness(g, handlers)
        sim.run_requests(g, ["r"])
        assert got == [[None, None]]
        assert all(s.labels.get("missing") for s in sim.spans("load"))


class TestAutoscale:
    policy = AutoscalePolicy()

    def test_up_and_down_steps(self):
        assert autoscale_tick(25, 26, self.policy) == 32
        assert autoscale_tick(32, 0, self.policy) == 25
        assert autoscale_tick(100, 5000, self.policy) == 100
        assert autoscale_tick(40, 40, self.policy) == 40
        assert autoscale_tick(25, 26, self.policy, cooldown_elapsed=False) == 25

    def test_trace_path(self):
        trace = autoscale_trace([5000] * 30 + [0] * 30, self.policy)
        path = [25] + trace
        ups = [r for i, r in enumerate(path) if i == 0 or r != path[i - 1]]
        assert ups[:8] == [25, 32, 40, 50, 63, 79, 99, 100]
        assert trace[-1] == 25

    def test_cooldown_spacing(self):
        trace = autoscale_trace([5000] * 20, self.policy)
        changes = [i for i in range(1, len(trace)) if trace[i] != trace[i - 1]]
        assert all(b - a >= 2 for a, b in zip(changes, changes[1:]))

    @pytest.mark.parametrize("kwargs", [dict(min_replicas=0), dict(min_replicas=5, max_replicas=4),
                                        dict(factor=0), dict(low_watermark=2.0)])
    def test_bad_policy(self, kwargs):
        with pytest.raises(ValueError):
            AutoscalePolicy(**kwargs)

    def test_pool_bounds_concurrency(self):
        g, handlers = chain([10], ["edge"])
        policy = AutoscalePolicy(min_replicas=2, max_replicas=2)
        sim = SimHarness(g, handlers, policy=policy)
        sim.run_requests(g, [f"r{i}" for i in range(6)])
        ends = sorted(s.start + s.duration for s in sim.spans("handler"))
        assert ends == [10, 10, 20, 20, 30, 30]

    def test_autoscaler_grows_pool_under_load(self):
        g, handlers = chain([1000], ["edge"])
        policy = AutoscalePolicy(min_replicas=2, max_replicas=8, tick_ms=100, cooldown_ms=100)
        sim = SimHarness(g, handlers, policy=policy)

        async def go():
            import asyncio
            scaler = asyncio.ensure_future(sim.runtime.autoscaler())
            await asyncio.gather(*(sim.submit(g, f"r{i}") for i in range(16)))
            scaler.cancel()

        sim.run(go)
        assert max(e["replicas"] for e in sim.runtime.autoscale_log) == 8
