"""Built-in workloads and their shipped workflow bundles."""

from __future__ import annotations

from pathlib import Path

from ..runtime import HandlerRegistry
from .iot_hub import IoTHubParams, SensorRecord, WindowIndex, iot_handlers, register_iot
from .video_analytics import VideoPipelineParams, placement_presets, register_video, video_handlers

BUNDLE_ROOT = Path(__file__).resolve().parent
VIDEO_BUNDLE = BUNDLE_ROOT / "video"
IOTHUB_ROOT = BUNDLE_ROOT / "iothub"


def builtin_handlers(video: VideoPipelineParams | None = None,
                     iot: IoTHubParams | None = None) -> HandlerRegistry:
    """A registry holding every built-in handler."""
    registry = HandlerRegistry()
    register_video(registry, video)
    register_iot(registry, iot)
    return registry


__all__ = [
    "BUNDLE_ROOT", "IOTHUB_ROOT", "VIDEO_BUNDLE", "IoTHubParams", "SensorRecord",
    "VideoPipelineParams", "WindowIndex", "builtin_handlers", "iot_handlers",
    "placement_presets", "register_iot", "register_video", "video_handlers",
]
