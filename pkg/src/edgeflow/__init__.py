"""edgeflow: a workflow benchmark harness for IoT, edge, and cloud tiers.

Workflows are declared as flat function templates, executed by a shared
runtime either on a deterministic simulated clock or across real per-tier
HTTP gateways, and measured as timed spans joined per request.
"""

from .clock import RealClock, SimClock
from .gateway import DelayMatrix, GatewayService, HttpInvoker, LocalInvoker, TierDescriptor
from .graph import WorkflowGraph, build_graph, load_bundle, successors, validate_storage_chain
from .metrics import Collector, MetricSpan, SpanKind, build_report, emit_report, end_to_end, p95
from .runtime import AutoscalePolicy, Handler, HandlerRegistry, InvocationEnvelope, Runtime, autoscale_tick
from .scheduler import LoadMode, LoadProfile, run_closed_loop, run_cron
from .scenario import Scenario, load_scenario, parse_scenario, run_scenario
from .storage import BackendRegistry, DataObject, MemoryBackend, QueueBackend, default_registry
from .template import FunctionTemplate, StorageRef, parse_template, render_template

__version__ = "0.1.0"

__all__ = [
    "AutoscalePolicy", "BackendRegistry", "Collector", "DataObject", "DelayMatrix", "FunctionTemplate",
    "GatewayService", "Handler", "HandlerRegistry", "HttpInvoker", "InvocationEnvelope", "LoadMode",
    "LoadProfile", "LocalInvoker", "MemoryBackend", "MetricSpan", "QueueBackend", "RealClock", "Runtime",
    "Scenario", "SimClock", "SpanKind", "StorageRef", "TierDescriptor", "WorkflowGraph",
    "autoscale_tick", "build_graph", "build_report", "default_registry", "emit_report", "end_to_end",
    "load_bundle", "load_scenario", "p95", "parse_scenario", "parse_template", "render_template",
    "run_closed_loop", "run_cron", "run_scenario", "successors", "validate_storage_chain",
]
