"""Function templates: the flat ``key: value`` files that declare one workflow stage.

A template names the function, the tier it is deployed on, the handler it
wraps, how it is invoked (``sync``), where its inputs come from, where its
outputs go, and which functions run next::

    name: face-detection
    tier: edge
    handler: video.detect
    sync: async
    input: minio://frames
    output: s3://faces
    next_function: face-recognition
    next_tier: cloud

Numbered keys (``output1``, ``next_function1``, ``next_tier1`` ...) declare
fan-out. Numbered next keys with numbered outputs form a branching stage
(output N and next N are one branch); numbered next keys with a single
unnumbered ``output`` form a one-to-many stage.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import (
    DuplicateKey,
    IndexMismatch,
    InvalidCron,
    InvalidRef,
    InvalidValue,
    MissingKey,
    TemplateSyntaxError,
    UnknownKey,
)

NAME_RE = re.compile(r"[a-z][a-z0-9_-]*")
HANDLER_RE = re.compile(r"[a-z][a-z0-9_.-]*")
_REF_RE = re.compile(r"([a-z][a-z0-9_-]*)://(\S+)")
_LINE_RE = re.compile(r"([A-Za-z0-9_.\-]+)[ \t]*:(.*)")
_INDEXED_RE = re.compile(r"(input|output|next_function|next_tier)([1-9][0-9]*)?")

CRON_MIN_MS = 1_000
CRON_MAX_MS = 86_400_000

DURATION_UNITS_MS = {"ms": 1, "s": 1_000, "m": 60_000, "h": 3_600_000}
_DURATION_RE = re.compile(r"(\d+(?:\.\d+)?)(ms|s|m|h)")


def parse_duration(text: str, units: tuple[str, ...] = ("ms", "s", "m", "h")) -> float:
    """``"5s"`` -> 5000.0. Raises ValueError on anything else."""
    m = _DURATION_RE.fullmatch(text.strip())
    if not m or m.group(2) not in units:
        raise ValueError(f"bad duration {text!r}")
    return float(m.group(1)) * DURATION_UNITS_MS[m.group(2)]


def format_duration(ms: int) -> str:
    for unit in ("h", "m", "s"):
        if ms % DURATION_UNITS_MS[unit] == 0:
            return f"{ms // DURATION_UNITS_MS[unit]}{unit}"
    return f"{ms}ms"


@dataclass(frozen=True)
class StorageRef:
    backend: str
    key: str

    def __post_init__(self):
        if not NAME_RE.fullmatch(self.backend) or not self.key or re.search(r"\s", self.key):
            raise InvalidRef(f"{self.backend}://{self.key}")

    @classmethod
    def parse(cls, text: str) -> StorageRef:
        m = _REF_RE.fullmatch(text)
        if not m:
            raise InvalidRef(text)
        return cls(m.group(1), m.group(2))

    def __str__(self) -> str:
        return f"{self.backend}://{self.key}"


@dataclass(frozen=True)
class NextSpec:
    function: str
    tier: str

    def __post_init__(self):
        if not NAME_RE.fullmatch(self.function):
            raise InvalidValue("next_function", self.function)
        if not NAME_RE.fullmatch(self.tier):
            raise InvalidValue("next_tier", self.tier)


@dataclass(frozen=True)
class OutputSpec:
    """A declared output. Its data name is the key part of the reference.

    ``index`` is 0 for the unnumbered ``output`` key and N for ``outputN``.
    """

    ref: StorageRef
    index: int = 0

    @property
    def data_name(self) -> str:
        return self.ref.key


class SyncMode(str, Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class CronSpec:
    period_ms: int
    burst: int = 1

    def __post_init__(self):
        if not (CRON_MIN_MS <= self.period_ms <= CRON_MAX_MS) or self.period_ms % 1000:
            raise InvalidCron(f"{self.period_ms}ms", reason="period must be whole seconds within 1s..24h")
        if self.burst < 1:
            raise InvalidCron(str(self.burst), reason="burst must be >= 1")


@dataclass(frozen=True)
class FunctionTemplate:
    name: str
    tier: str
    handler: str
    sync: SyncMode = SyncMode.SYNC
    inputs: tuple[StorageRef, ...] = ()
    outputs: tuple[OutputSpec, ...] = ()
    nexts: tuple[tuple[int, NextSpec], ...] = ()
    cron: CronSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "sync", SyncMode(self.sync))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "nexts", tuple((int(i), n) for i, n in self.nexts))
        for key, value, pattern in (("name", self.name, NAME_RE), ("tier", self.tier, NAME_RE),
                                    ("handler", self.handler, HANDLER_RE)):
            if not pattern.fullmatch(value):
                raise InvalidValue(key, value)
        _check_alignment(self.outputs, self.nexts)

    @property
    def input(self) -> StorageRef | None:
        return self.inputs[0] if self.inputs else None

    @property
    def is_terminal(self) -> bool:
        return not self.nexts

    @property
    def is_branching(self) -> bool:
        return any(i > 0 for i, _ in self.nexts)

    def output_for_branch(self, index: int) -> OutputSpec | None:
        if index == 0:
            return self.outputs[0] if len(self.outputs) == 1 and self.outputs[0].index == 0 else None
        return next((o for o in self.outputs if o.index == index), None)


def _contiguous(indices) -> bool:
    return sorted(indices) == list(range(1, len(indices) + 1))


def _check_alignment(outputs, nexts) -> None:
    names = [o.data_name for o in outputs]
    if len(set(names)) != len(names):
        raise IndexMismatch(f"output data names must be distinct: {names}")
    out_idx = [o.index for o in outputs]
    nxt_idx = [i for i, _ in nexts]
    if 0 in out_idx and len(out_idx) > 1:
        raise IndexMismatch("unnumbered output mixed with other outputs")
    if any(out_idx) and not _contiguous(out_idx):
        raise IndexMismatch(f"output indices {sorted(out_idx)} are not 1..N")
    numbered_nexts = [i for i in nxt_idx if i > 0]
    if numbered_nexts and len(numbered_nexts) != len(nxt_idx):
        raise IndexMismatch("branch indices mixed with unnumbered successors")
    if len(set(numbered_nexts)) != len(numbered_nexts):
        raise IndexMismatch(f"branch indices {sorted(numbered_nexts)} repeat")
    if nxt_idx.count(0) > 0 and any(out_idx):
        raise IndexMismatch("numbered outputs require numbered branches")
    if not set(numbered_nexts) <= set(out_idx):
        raise IndexMismatch("each branch needs an output with the same index")


# -- flat key/value documents ------------------------------------------------


def parse_flat(text: str) -> dict[str, tuple[str, int]]:
    """Parse ``key: value`` lines into ``{key: (value, line_number)}``.

    ``#`` comments and blank lines are skipped. Indented lines, lines without
    a colon, and empty values are syntax errors, as are repeated keys.
    """
    pairs: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line[0] in " \t":
            raise TemplateSyntaxError(lineno, "indentation is not allowed")
        m = _LINE_RE.fullmatch(line)
        if not m:
            raise TemplateSyntaxError(lineno, f"expected 'key: value', got {raw.strip()!r}")
        key, value = m.group(1), m.group(2).strip()
        if not value:
            raise TemplateSyntaxError(lineno, f"empty value for {key!r}")
        if key in pairs:
            raise DuplicateKey(key, lineno)
        pairs[key] = (value, lineno)
    return pairs


def parse_cron(value: str, line: int | None = None) -> int:
    try:
        ms = parse_duration(value, units=("s", "m", "h"))
    except ValueError:
        raise InvalidCron(value, line, "expected <int><s|m|h>") from None
    if ms != int(ms) or "." in value:
        raise InvalidCron(value, line, "expected an integer amount")
    if not CRON_MIN_MS <= ms <= CRON_MAX_MS:
        raise InvalidCron(value, line, "period must be within 1s..24h")
    return int(ms)


def _ref(value: str, line: int) -> StorageRef:
    m = _REF_RE.fullmatch(value)
    if not m:
        raise InvalidRef(value, line)
    return StorageRef(m.group(1), m.group(2))


def parse_template_with_lines(text: str) -> tuple[FunctionTemplate, dict[str, int]]:
    pairs = parse_flat(text)
    lines = {k: ln for k, (_, ln) in pairs.items()}
    scalars: dict[str, str] = {}
    grouped: dict[str, dict[int | None, tuple[str, int]]] = {
        "input": {}, "output": {}, "next_function": {}, "next_tier": {}}

    for key, (value, ln) in pairs.items():
        if key in ("name", "tier", "handler", "sync", "cron", "cron_burst"):
            scalars[key] = value
            continue
        m = _INDEXED_RE.fullmatch(key)
        if not m or (m.group(1) == "input" and m.group(2) == "1"):
            raise UnknownKey(key, ln)
        grouped[m.group(1)][int(m.group(2)) if m.group(2) else None] = (value, ln)

    for key in ("name", "tier", "handler", "sync"):
        if key not in scalars:
            raise MissingKey(key)
    for key in ("name", "tier"):
        if not NAME_RE.fullmatch(scalars[key]):
            raise InvalidValue(key, scalars[key], lines[key])
    if not HANDLER_RE.fullmatch(scalars["handler"]):
        raise InvalidValue("handler", scalars["handler"], lines["handler"])
    try:
        sync = SyncMode(scalars["sync"])
    except ValueError:
        raise InvalidValue("sync", scalars["sync"], lines["sync"]) from None

    cron = None
    if "cron" in scalars:
        period = parse_cron(scalars["cron"], lines["cron"])
        burst = 1
        if "cron_burst" in scalars:
            raw = scalars["cron_burst"]
            if not raw.isdigit() or int(raw) < 1:
                raise InvalidCron(raw, lines["cron_burst"], "burst must be an integer >= 1")
            burst = int(raw)
        cron = CronSpec(period, burst)
    elif "cron_burst" in scalars:
        raise InvalidCron(scalars["cron_burst"], lines["cron_burst"], "cron_burst without cron")

    # inputs: `input` is slot 1, then input2..inputN
    ins = grouped["input"]
    slots = {(1 if i is None else i): v for i, v in ins.items()}
    if slots and sorted(slots) != list(range(1, len(slots) + 1)):
        ln = min(v[1] for v in slots.values())
        raise IndexMismatch(f"input keys must be input, input2..inputN (got slots {sorted(slots)})", ln)
    inputs = tuple(_ref(*slots[i]) for i in sorted(slots))

    outs = grouped["output"]
    if None in outs and len(outs) > 1:
        raise IndexMismatch("output mixed with numbered outputs", outs[None][1])
    outputs = tuple(OutputSpec(_ref(v, ln), 0 if i is None else i)
                    for i, (v, ln) in sorted(outs.items(), key=lambda kv: kv[0] or 0))

    fns, tiers = grouped["next_function"], grouped["next_tier"]
    for group, label in ((fns, "next_function"), (tiers, "next_tier")):
        if None in group and len(group) > 1:
            raise IndexMismatch(f"{label} mixed with numbered {label} keys", group[None][1])
    if set(fns) != set(tiers):
        ln = min([v[1] for v in fns.values()] + [v[1] for v in tiers.values()])
        raise IndexMismatch("next_function and next_tier keys do not pair up", ln)
    nexts = []
    for i in sorted(fns, key=lambda k: k or 0):
        (fn, fn_ln), (tier, tier_ln) = fns[i], tiers[i]
        if not NAME_RE.fullmatch(fn):
            raise InvalidValue("next_function", fn, fn_ln)
        if not NAME_RE.fullmatch(tier):
            raise InvalidValue("next_tier", tier, tier_ln)
        nexts.append((i or 0, NextSpec(fn, tier)))
    # numbered successors without numbered outputs are one-to-many: branch 0
    if nexts and all(i > 0 for i, _ in nexts) and not any(o.index for o in outputs):
        nexts = [(0, n) for _, n in nexts]

    ln_hint = min([ln for k, ln in lines.items() if k.startswith(("output", "next_"))], default=None)
    try:
        template = FunctionTemplate(
            name=scalars["name"], tier=scalars["tier"], handler=scalars["handler"], sync=sync,
            inputs=inputs, outputs=outputs, nexts=tuple(nexts), cron=cron)
    except IndexMismatch as exc:
        exc.line = ln_hint
        raise
    return template, lines


def parse_template(text: str) -> FunctionTemplate:
    """Parse one template document. All-or-nothing: any defect raises."""
    return parse_template_with_lines(text)[0]


def load_template(path: str | Path) -> FunctionTemplate:
    return parse_template(Path(path).read_text(encoding="utf-8"))


def render_template(t: FunctionTemplate) -> str:
    """Emit ``t`` in canonical key order; ``parse_template`` inverts this."""
    out = [f"name: {t.name}", f"tier: {t.tier}", f"handler: {t.handler}", f"sync: {t.sync.value}"]
    if t.cron is not None:
        out.append(f"cron: {format_duration(t.cron.period_ms)}")
        if t.cron.burst != 1:
            out.append(f"cron_burst: {t.cron.burst}")
    for slot, ref in enumerate(t.inputs, start=1):
        out.append(f"input{'' if slot == 1 else slot}: {ref}")
    for o in t.outputs:
        out.append(f"output{o.index or ''}: {o.ref}")
    numbered = len(t.nexts) > 1 or t.is_branching
    labels = [str(i if i else pos) if numbered else "" for pos, (i, _) in enumerate(t.nexts, start=1)]
    for label, (_, n) in zip(labels, t.nexts):
        out.append(f"next_function{label}: {n.function}")
    for label, (_, n) in zip(labels, t.nexts):
        out.append(f"next_tier{label}: {n.tier}")
    return "\n".join(out) + "\n"
