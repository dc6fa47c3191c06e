"""Per-platform fusion: sensor frames in, confirmed platform-frame tracks out.

Every observation is first expanded into a Gaussian whose covariance comes
from the pipeline's error models evaluated at the measured distance, then a
predict / JPDA / multi-update cycle runs over the platform's track list.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .association import AssociationConfig, Track, associate_frame
from .error_models import ErrorModel, PolarObservation, SensorPose, observation_estimate
from .tracking import ProcessNoiseConfig, ctrv_predict


class StaleFrameError(ValueError):
    """Raised when a frame is not newer than the last processed one."""


@dataclass(frozen=True)
class SensorPipelineConfig:
    """One sensor-plus-recognizer pipeline as fusion sees it."""

    name: str
    pose: SensorPose
    fov: float
    max_range: float
    rate: float
    distal_model: ErrorModel
    perp_model: ErrorModel

    def __post_init__(self):
        if not (0.0 < self.fov <= 2.0 * math.pi + 1e-12):
            raise ValueError(f"fov must be in (0, 2*pi], got {self.fov}")
        if not (self.max_range > 0.0):
            raise ValueError("max_range must be positive")
        if not (self.rate > 0.0):
            raise ValueError("rate must be positive")


@dataclass
class LocalFrame:
    """One synchronized tick of detections, keyed by pipeline name."""

    timestamp: float
    observations: dict[str, list[PolarObservation]] = field(default_factory=dict)


class LocalFusion:
    """Fusion instance owned by a single platform."""

    def __init__(
        self,
        pipelines: list[SensorPipelineConfig],
        association: AssociationConfig | None = None,
        noise: ProcessNoiseConfig | None = None,
    ):
        names = [p.name for p in pipelines]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate pipeline names: {names}")
        self.pipelines = {p.name: p for p in pipelines}
        self.association = association or AssociationConfig()
        self.noise = noise or ProcessNoiseConfig()
        self.tracks: list[Track] = []
        self._ids = itertools.count()
        self._last_timestamp = -math.inf

    def step(self, frame: LocalFrame) -> list[Track]:
        """Process one frame; returns snapshots of the confirmed tracks."""
        if frame.timestamp <= self._last_timestamp:
            raise StaleFrameError(
                f"frame at t={frame.timestamp} is not newer than t={self._last_timestamp}"
            )
        self._last_timestamp = frame.timestamp

        by_pipeline: dict[str, list] = {}
        for name, pipeline in self.pipelines.items():
            by_pipeline[name] = [
                observation_estimate(
                    obs, pipeline.pose, pipeline.distal_model, pipeline.perp_model, source=name
                )
                for obs in frame.observations.get(name, [])
            ]

        for track in self.tracks:
            track.estimate = ctrv_predict(track.estimate, self.noise)

        self.tracks = associate_frame(
            self.tracks, by_pipeline, self.association, lambda: next(self._ids)
        )
        return self.confirmed_tracks()

    def confirmed_tracks(self) -> list[Track]:
        return [t.snapshot() for t in self.tracks if t.confirmed]
