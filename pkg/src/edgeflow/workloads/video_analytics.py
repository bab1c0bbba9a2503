"""Synthetic video-analytics pipeline: generator, motion, face detection, recognition.

Frames carry no pixels. A chunk object is a run of fixed-size frame slots,
each holding the frame id followed by zero padding, so object sizes track
``frame_bytes`` while handlers can still tell frames apart. Pass/fail
decisions are drawn from an RNG keyed by (seed, stage, frame id), which makes
every frame's fate independent of scheduling order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..runtime import Handler, HandlerContext, HandlerRegistry

GENERATOR = "generator"
MOTION = "motion-detection"
DETECT = "face-detection"
RECOGNIZE = "face-recognition"
STAGES = (GENERATOR, MOTION, DETECT, RECOGNIZE)

HANDLER_IDS = {
    GENERATOR: "video.generate",
    MOTION: "video.motion",
    DETECT: "video.detect_faces",
    RECOGNIZE: "video.recognize",
}

IDENTITIES = ("alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi")


@dataclass(frozen=True)
class VideoPipelineParams:
    fps: int = 10
    chunk_frames: int = 10
    frame_bytes: int = 64 * 1024
    motion_pass_p: float = 0.45
    face_pass_p: float = 0.40
    costs_ms: dict = field(default_factory=lambda: {
        "generator": 2.0, "motion": 8.0, "detect": 10.0, "recognize": 25.0})

    def __post_init__(self):
        for name in ("motion_pass_p", "face_pass_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.fps < 1 or self.chunk_frames < 1:
            raise ValueError("fps and chunk_frames must be >= 1")
        if self.frame_bytes < 64:
            raise ValueError("frame_bytes must be >= 64 to hold a frame id")
        missing = {"generator", "motion", "detect", "recognize"} - set(self.costs_ms)
        if missing:
            raise ValueError(f"costs_ms is missing {sorted(missing)}")

    @property
    def reach_ratio(self) -> float:
        return self.motion_pass_p * self.face_pass_p


def pack_frames(frame_ids: list[str], frame_bytes: int) -> bytes:
    out = bytearray()
    for fid in frame_ids:
        raw = fid.encode()
        if len(raw) >= frame_bytes:
            raise ValueError(f"frame id {fid!r} does not fit in {frame_bytes} bytes")
        out += raw.ljust(frame_bytes, b"\0")
    return bytes(out)


def unpack_frames(blob: bytes, frame_bytes: int) -> list[str]:
    if len(blob) % frame_bytes:
        raise ValueError(f"chunk of {len(blob)} bytes is not a multiple of {frame_bytes}")
    return [blob[i:i + frame_bytes].rstrip(b"\0").decode() for i in range(0, len(blob), frame_bytes)]


def frame_passes(ctx: HandlerContext, stage: str, frame_id: str, p: float) -> bool:
    return ctx.keyed_rng(stage, frame_id).random() < p


def video_handlers(params: VideoPipelineParams) -> dict[str, Handler]:
    fb = params.frame_bytes
    ms_per_frame = 1000.0 / params.fps

    def generate(inputs, ctx):
        ids = [f"{ctx.request_id}/{i}" for i in range(params.chunk_frames)]
        ctx.labels.update(frames=len(ids), stream_ms=len(ids) * ms_per_frame)
        return [("gop", pack_frames(ids, fb))]

    def motion(inputs, ctx):
        frames = unpack_frames(inputs[0].data, fb)
        kept = [f for f in frames if frame_passes(ctx, "motion", f, params.motion_pass_p)]
        ctx.labels.update(frames_in=len(frames), frames=len(kept))
        return [("frames", pack_frames(kept, fb))] if kept else []

    def detect(inputs, ctx):
        frames = unpack_frames(inputs[0].data, fb)
        faces = [f for f in frames if frame_passes(ctx, "face", f, params.face_pass_p)]
        ctx.labels.update(frames_in=len(frames), frames=len(faces))
        if faces:
            return [("has_face", pack_frames(faces, fb))]
        return [("no_face", pack_frames(frames, fb))]

    def recognize(inputs, ctx):
        frames = unpack_frames(inputs[0].data, fb)
        tags = {f: IDENTITIES[ctx.keyed_rng("identity", f).randrange(len(IDENTITIES))] for f in frames}
        ctx.labels.update(frames=len(frames))
        return [("identities", json.dumps(tags, sort_keys=True).encode())]

    costs = params.costs_ms
    return {
        HANDLER_IDS[GENERATOR]: Handler(generate, costs["generator"]),
        HANDLER_IDS[MOTION]: Handler(motion, costs["motion"]),
        HANDLER_IDS[DETECT]: Handler(detect, costs["detect"]),
        HANDLER_IDS[RECOGNIZE]: Handler(recognize, costs["recognize"]),
    }


def register_video(registry: HandlerRegistry, params: VideoPipelineParams | None = None) -> None:
    for hid, h in video_handlers(params or VideoPipelineParams()).items():
        registry.register(hid, h)


def placement_presets() -> dict[str, dict[str, str]]:
    """The three tier assignments compared for the video pipeline."""
    return {
        "IoT and edge": {GENERATOR: "iot", MOTION: "iot", DETECT: "edge", RECOGNIZE: "edge"},
        "IoT and cloud": {GENERATOR: "iot", MOTION: "iot", DETECT: "cloud", RECOGNIZE: "cloud"},
        "three tiers": {GENERATOR: "iot", MOTION: "iot", DETECT: "edge", RECOGNIZE: "cloud"},
    }
