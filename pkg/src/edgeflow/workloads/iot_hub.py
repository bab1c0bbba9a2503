"""Synthetic IoT hub: sensor ingest, periodic training, prediction, and queries.

The time-series database role is played by ``WindowIndex``, a storage
backend that appends sensor records on store and answers window scans on
load. A load key of ``series@30s`` returns the last 30 s of ``series``;
``series@train`` resolves a named window from the workload parameters.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import statistics
import threading
from dataclasses import dataclass, field
from typing import Callable

from ..errors import NotFound
from ..runtime import Handler, HandlerContext, HandlerRegistry
from ..storage import Backend, DataObject, QueueBackend, wall_ms
from ..template import parse_duration

SENSORS = "sensors"
TRAIN = "train"
PREDICT = "predict"
QUERY = "query"

HANDLER_IDS = {SENSORS: "iot.sensors", TRAIN: "iot.train", PREDICT: "iot.predict", QUERY: "iot.query"}

HEALTH = ("ok", "degraded", "failed")

# a pool of twelve fixed queries over the sensor table
QUERY_POOL = (
    "last-location", "low-power", "high-temperature", "stationary-sensors",
    "long-degraded-sessions", "daily-degraded-sessions", "avg-vs-projected-power",
    "avg-daily-moisture", "avg-daily-temperature", "avg-elevation", "daily-activity",
    "failure-frequency",
)

RECORD_BYTES = 224
TIMESERIES = "timeseries"


@dataclass(frozen=True)
class IoTHubParams:
    sensors: int = 100
    emit_period_ms: float = 1_000
    train_period_ms: float = 30 * 60_000
    train_window_ms: float = 30 * 60_000
    predict_period_ms: float = 5_000
    predict_window_ms: float = 30_000
    query_period_ms: float = 3_000
    query_window_ms: float = 3_000
    query_pool: tuple[str, ...] = QUERY_POOL
    costs_ms: dict = field(default_factory=lambda: {"train": 2000.0, "predict": 40.0, "query": 15.0})
    model_bytes: int = 1024 * 1024

    def __post_init__(self):
        if self.sensors < 1:
            raise ValueError("sensors must be >= 1")
        if len(self.query_pool) != 12 or len(set(self.query_pool)) != 12:
            raise ValueError("query_pool must hold exactly 12 distinct ids")
        for name in ("emit_period_ms", "train_period_ms", "train_window_ms", "predict_period_ms",
                     "predict_window_ms", "query_period_ms", "query_window_ms"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def scaled(self, time_scale: float) -> IoTHubParams:
        """Scale the minute-level periods and windows; second-level ones stay put."""
        def s(ms):
            return ms * time_scale if ms >= 60_000 else ms
        return IoTHubParams(
            sensors=self.sensors, emit_period_ms=self.emit_period_ms,
            train_period_ms=s(self.train_period_ms), train_window_ms=s(self.train_window_ms),
            predict_period_ms=s(self.predict_period_ms), predict_window_ms=s(self.predict_window_ms),
            query_period_ms=s(self.query_period_ms), query_window_ms=s(self.query_window_ms),
            query_pool=self.query_pool, costs_ms=dict(self.costs_ms), model_bytes=self.model_bytes)

    @property
    def windows(self) -> dict[str, float]:
        return {TRAIN: self.train_window_ms, PREDICT: self.predict_window_ms,
                QUERY: self.query_window_ms}


@dataclass(frozen=True)
class SensorRecord:
    sensor_id: str
    latitude: float
    longitude: float
    elevation: float
    temperature: float
    moisture: float
    power: float
    health: str
    t: int

    def __post_init__(self):
        if self.health not in HEALTH:
            raise ValueError(f"health must be one of {HEALTH}, got {self.health!r}")

    def to_bytes(self) -> bytes:
        """Canonical JSON in field order, space-padded to ``RECORD_BYTES``."""
        doc = {
            "sensor_id": self.sensor_id,
            "latitude": round(self.latitude, 5),
            "longitude": round(self.longitude, 5),
            "elevation": round(self.elevation, 2),
            "temperature": round(self.temperature, 2),
            "moisture": round(self.moisture, 4),
            "power": round(self.power, 3),
            "health": self.health,
            "t": int(self.t),
        }
        raw = json.dumps(doc, separators=(",", ":")).encode()
        if len(raw) > RECORD_BYTES:
            raise ValueError(f"record exceeds {RECORD_BYTES} bytes")
        return raw.ljust(RECORD_BYTES)

    @classmethod
    def from_bytes(cls, raw: bytes) -> SensorRecord:
        return cls(**json.loads(raw))


def split_records(blob: bytes) -> list[bytes]:
    if len(blob) % RECORD_BYTES:
        raise ValueError(f"{len(blob)} bytes is not a whole number of records")
    return [blob[i:i + RECORD_BYTES] for i in range(0, len(blob), RECORD_BYTES)]


def decode_records(blob: bytes) -> list[SensorRecord]:
    return [SensorRecord.from_bytes(r) for r in split_records(blob)]


class WindowIndex(Backend):
    """In-memory time-window index with an ingest queue alongside.

    ``store`` appends every record in the object (and the raw batch to the
    ingest queue); ``load("series@window")`` returns records whose timestamp
    lies in ``(now - window, now]``. Unknown series scan as empty.
    """

    kind = TIMESERIES

    def __init__(self, now: Callable[[], float] = wall_ms, windows: dict[str, float] | None = None,
                 ingest: QueueBackend | None = None):
        self.now = now
        self.windows = dict(windows or {})
        self.ingest = ingest if ingest is not None else QueueBackend()
        self._series: dict[str, tuple[list[float], list[bytes]]] = {}
        self._lock = threading.Lock()

    def store(self, key, obj):
        if "@" in key:
            raise ValueError(f"cannot store to a window key {key!r}")
        records = split_records(obj.data)
        stamps = [float(json.loads(r)["t"]) for r in records]
        with self._lock:
            ts, rows = self._series.setdefault(key, ([], []))
            for t, r in zip(stamps, records):
                i = bisect.bisect_right(ts, t)
                ts.insert(i, t)
                rows.insert(i, r)
        self.ingest.store(key, obj)
        return obj.size

    def window_ms(self, spec: str) -> float:
        if spec in self.windows:
            return self.windows[spec]
        try:
            return parse_duration(spec)
        except ValueError:
            raise NotFound(f"window {spec!r}") from None

    def load(self, key):
        series, _, spec = key.partition("@")
        now = self.now()
        with self._lock:
            ts, rows = self._series.get(series, ([], []))
            hi = bisect.bisect_right(ts, now)
            lo = bisect.bisect_right(ts, now - self.window_ms(spec)) if spec else 0
            data = b"".join(rows[lo:hi])
        return DataObject(key, data, now)

    def count(self, series: str) -> int:
        with self._lock:
            return len(self._series.get(series, ([], []))[0])


# -- handlers ----------------------------------------------------------------


def _sensor_record(ctx: HandlerContext, i: int) -> SensorRecord:
    sid = f"s{i:05d}"
    home = ctx.keyed_rng("sensor-home", sid)
    lat, lon, elev = home.uniform(-60, 70), home.uniform(-180, 180), home.uniform(0, 3000)
    r = ctx.rng(sid)
    u = r.random()
    health = "ok" if u < 0.9 else "degraded" if u < 0.98 else "failed"
    return SensorRecord(
        sensor_id=sid, latitude=lat, longitude=lon, elevation=elev,
        temperature=r.gauss(18, 8), moisture=r.random(), power=r.uniform(0.5, 12.0),
        health=health, t=int(ctx.now_ms))


def run_query(query_id: str, records: list[SensorRecord]) -> dict:
    """Evaluate one pool query as a window scan."""
    if not records:
        return {"query": query_id, "rows": 0, "value": None}
    by_sensor: dict[str, list[SensorRecord]] = {}
    for rec in records:
        by_sensor.setdefault(rec.sensor_id, []).append(rec)
    last = {s: max(rs, key=lambda r: r.t) for s, rs in by_sensor.items()}
    if query_id == "last-location":
        value = {s: [r.latitude, r.longitude] for s, r in sorted(last.items())}
    elif query_id == "low-power":
        value = sorted(s for s, r in last.items() if r.power < 1.0)
    elif query_id == "high-temperature":
        value = sorted(s for s, r in last.items() if r.temperature > 30.0)
    elif query_id == "stationary-sensors":
        value = sorted(s for s, rs in by_sensor.items() if len({(r.latitude, r.longitude) for r in rs}) == 1)
    elif query_id == "long-degraded-sessions":
        value = sorted(s for s, rs in by_sensor.items() if sum(r.health == "degraded" for r in rs) > 1)
    elif query_id == "daily-degraded-sessions":
        value = sum(r.health == "degraded" for r in records)
    elif query_id == "avg-vs-projected-power":
        value = statistics.fmean(r.power for r in records) - 6.25
    elif query_id == "avg-daily-moisture":
        value = statistics.fmean(r.moisture for r in records)
    elif query_id == "avg-daily-temperature":
        value = statistics.fmean(r.temperature for r in records)
    elif query_id == "avg-elevation":
        value = statistics.fmean(r.elevation for r in records)
    elif query_id == "daily-activity":
        value = len(by_sensor)
    elif query_id == "failure-frequency":
        value = sum(r.health == "failed" for r in records) / len(records)
    else:
        raise ValueError(f"unknown query {query_id!r}")
    return {"query": query_id, "rows": len(records), "value": value}


def pick_query(ctx: HandlerContext, pool: tuple[str, ...] = QUERY_POOL) -> str:
    return pool[ctx.rng("query").randrange(len(pool))]


def model_blob(window: bytes, size: int) -> bytes:
    digest = hashlib.sha256(window).digest()
    return (digest * (size // len(digest) + 1))[:size]


def iot_handlers(params: IoTHubParams) -> dict[str, Handler]:
    def sensors(inputs, ctx):
        batch = b"".join(_sensor_record(ctx, i).to_bytes() for i in range(params.sensors))
        ctx.labels.update(records=params.sensors)
        return [("sensor-data", batch)]

    def train(inputs, ctx):
        window = inputs[0].data
        ctx.labels.update(records=len(window) // RECORD_BYTES)
        return [("model", model_blob(window, params.model_bytes))]

    def predict(inputs, ctx):
        records = decode_records(inputs[0].data)
        model = inputs[1] if len(inputs) > 1 else None
        if model is None:
            ctx.labels.update(cold=True, records=len(records))
            return [("prediction", b'{"cold":true}')]
        mean = statistics.fmean(r.temperature for r in records) if records else None
        bias = model.data[0] / 255.0
        ctx.labels.update(cold=False, records=len(records))
        forecast = None if mean is None else round(mean + bias, 4)
        return [("prediction", json.dumps({"cold": False, "forecast": forecast}).encode())]

    def query(inputs, ctx):
        qid = pick_query(ctx, params.query_pool)
        ctx.labels.update(query=qid)
        result = run_query(qid, decode_records(inputs[0].data))
        return [("query-result", json.dumps(result, sort_keys=True).encode())]

    costs = params.costs_ms
    return {
        HANDLER_IDS[SENSORS]: Handler(sensors, 0.0),
        HANDLER_IDS[TRAIN]: Handler(train, costs["train"]),
        HANDLER_IDS[PREDICT]: Handler(predict, costs["predict"], optional_inputs=frozenset({1})),
        HANDLER_IDS[QUERY]: Handler(query, costs["query"]),
    }


def register_iot(registry: HandlerRegistry, params: IoTHubParams | None = None) -> None:
    for hid, h in iot_handlers(params or IoTHubParams()).items():
        registry.register(hid, h)
