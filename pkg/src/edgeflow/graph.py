"""Workflow graphs built from function templates.

``build_graph`` wires templates into a DAG, checks it, and classifies its
shape; ``successors`` decides which stages run after a function produced a
named output; ``load_bundle`` reads a workflow directory of ``.fn`` files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .errors import (
    CycleDetected,
    DuplicateFunction,
    EdgeflowError,
    MultipleEntries,
    NoBranchMatch,
    TemplateError,
    Unreachable,
    UnknownSuccessor,
)
from .template import FunctionTemplate, NextSpec, StorageRef, parse_flat, parse_template_with_lines

MANIFEST_NAME = "manifest"


class Logic(str, Enum):
    PIPELINE = "pipeline"
    ONE_TO_MANY = "one-to-many"
    BRANCHING = "branching"
    MIXED = "mixed"


@dataclass(frozen=True)
class WorkflowKind:
    value: Logic
    cron_wrapped: bool = False

    def __str__(self) -> str:
        return f"{self.value.value}{' (cron)' if self.cron_wrapped else ''}"


@dataclass(frozen=True)
class Edge:
    source: str
    branch: int
    target: NextSpec


@dataclass(frozen=True)
class WorkflowGraph:
    workflow_name: str
    nodes: Mapping[str, FunctionTemplate]
    entry: str
    kind: WorkflowKind
    edges: tuple[Edge, ...]

    def __getitem__(self, name: str) -> FunctionTemplate:
        return self.nodes[name]

    @property
    def entry_template(self) -> FunctionTemplate:
        return self.nodes[self.entry]


def _find_cycle(nodes: Mapping[str, FunctionTemplate]) -> list[str] | None:
    white, grey, black = 0, 1, 2
    color = {n: white for n in nodes}
    stack: list[str] = []

    def visit(n: str) -> list[str] | None:
        color[n] = grey
        stack.append(n)
        for _, nxt in nodes[n].nexts:
            m = nxt.function
            if color[m] == grey:
                return stack[stack.index(m):] + [m]
            if color[m] == white:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = black
        return None

    for n in nodes:
        if color[n] == white:
            found = visit(n)
            if found:
                return found
    return None


def classify(nodes: Mapping[str, FunctionTemplate], entry: str) -> WorkflowKind:
    one_to_many = branching = False
    for t in nodes.values():
        if len(t.nexts) <= 1:
            continue
        if t.is_branching:
            branching = True
        else:
            one_to_many = True
    if one_to_many and branching:
        logic = Logic.MIXED
    elif branching:
        logic = Logic.BRANCHING
    elif one_to_many:
        logic = Logic.ONE_TO_MANY
    else:
        logic = Logic.PIPELINE
    return WorkflowKind(logic, nodes[entry].cron is not None)


def build_graph(name: str, templates: list[FunctionTemplate]) -> WorkflowGraph:
    if not templates:
        raise ValueError("a workflow needs at least one function")
    nodes: dict[str, FunctionTemplate] = {}
    for t in templates:
        if t.name in nodes:
            raise DuplicateFunction(t.name)
        nodes[t.name] = t

    edges = []
    for t in nodes.values():
        for branch, nxt in t.nexts:
            if nxt.function not in nodes:
                raise UnknownSuccessor(t.name, nxt.function)
            edges.append(Edge(t.name, branch, nxt))

    cycle = _find_cycle(nodes)
    if cycle:
        raise CycleDetected(cycle)

    targets = {e.target.function for e in edges}
    entries = [n for n in nodes if n not in targets]
    if len(entries) > 1:
        raise MultipleEntries(entries)
    entry = entries[0]

    seen = {entry}
    frontier = [entry]
    while frontier:
        for _, nxt in nodes[frontier.pop()].nexts:
            if nxt.function not in seen:
                seen.add(nxt.function)
                frontier.append(nxt.function)
    missing = [n for n in nodes if n not in seen]
    if missing:
        raise Unreachable(missing)

    return WorkflowGraph(name, MappingProxyType(nodes), entry, classify(nodes, entry), tuple(edges))


def successors(g: WorkflowGraph, source: str, produced_data_name: str) -> list[NextSpec]:
    """Stages to invoke after ``source`` produced an object named ``produced_data_name``.

    Branching stages select the branches whose output data name matches
    exactly; every other shape forwards to all successors.
    """
    t = g.nodes[source]
    if not t.nexts:
        return []
    if not t.is_branching:
        return [n for _, n in t.nexts]
    if all(o.data_name != produced_data_name for o in t.outputs):
        raise NoBranchMatch(source, produced_data_name)
    # a declared output without a paired branch ends the chain there
    return [n for i, n in t.nexts if t.output_for_branch(i).data_name == produced_data_name]


@dataclass(frozen=True)
class ChainWarning:
    source: str
    target: str
    produced: StorageRef | None
    consumed: StorageRef | None

    def __str__(self) -> str:
        return (f"{self.source} -> {self.target}: output {self.produced or '(none)'} "
                f"does not feed input {self.consumed or '(none)'}")


def validate_storage_chain(g: WorkflowGraph) -> list[ChainWarning]:
    warnings = []
    for e in g.edges:
        produced = g.nodes[e.source].output_for_branch(e.branch)
        produced_ref = produced.ref if produced else None
        consumed = g.nodes[e.target.function].input
        if produced_ref != consumed:
            warnings.append(ChainWarning(e.source, e.target.function, produced_ref, consumed))
    return warnings


# -- bundles -----------------------------------------------------------------


@dataclass
class Bundle:
    """A workflow directory: one ``.fn`` file per function plus a ``manifest``."""

    path: Path
    name: str
    templates: list[FunctionTemplate]
    sources: dict[str, tuple[Path, dict[str, int]]]
    files: list[tuple[Path, FunctionTemplate, dict[str, int]]] = field(default_factory=list)

    def build(self) -> WorkflowGraph:
        return build_graph(self.name, self.templates)


class BundleError(EdgeflowError):
    def __init__(self, path: Path, line: int | None, cause: Exception):
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
        self.path = path
        self.line = line
        self.cause = cause


def read_manifest(directory: Path) -> str:
    path = directory / MANIFEST_NAME
    try:
        pairs = parse_flat(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        return directory.name
    except TemplateError as exc:
        raise BundleError(path, exc.line, exc) from exc
    extra = set(pairs) - {"workflow"}
    if extra:
        raise BundleError(path, pairs[sorted(extra)[0]][1], ValueError(f"unknown keys {sorted(extra)}"))
    return pairs["workflow"][0] if "workflow" in pairs else directory.name


def load_bundle(directory: str | Path) -> Bundle:
    directory = Path(directory)
    name = read_manifest(directory)
    templates, sources, files = [], {}, []
    for path in sorted(directory.glob("*.fn")):
        try:
            t, lines = parse_template_with_lines(path.read_text(encoding="utf-8"))
        except TemplateError as exc:
            raise BundleError(path, exc.line, exc) from exc
        templates.append(t)
        files.append((path, t, lines))
        sources.setdefault(t.name, (path, lines))
    if not templates:
        raise BundleError(directory, None, FileNotFoundError("no .fn templates"))
    return Bundle(directory, name, templates, sources, files)


def is_bundle(directory: Path) -> bool:
    return any(directory.glob("*.fn"))
