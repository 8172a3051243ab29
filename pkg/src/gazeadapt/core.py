"""Domain types and angular metrics for gaze regression.

Gaze directions are (pitch, yaw) pairs in radians. The fixed vector
convention is

    v = (cos(pitch) * sin(yaw), sin(pitch), cos(pitch) * cos(yaw))

so (0, 0) looks straight down the +z axis. Any consistent convention
yields the same angular error; this one is the common normalized-camera
convention in gaze datasets. Angles are radians everywhere internally;
degrees appear only in reported errors.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class GazeLabel:
    """A gaze direction as (pitch, yaw) in radians.

    Constructing a label only requires finite values, so model predictions
    (unconstrained reals) can be wrapped for metric computation. Dataset
    ingestion goes through :meth:`ingest`, which additionally enforces
    pitch in [-pi/2, pi/2] and yaw in [-pi, pi]. Those bounds are a
    convention of this artifact, not a property of the metric.
    """

    pitch: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise ValueError(
                f"gaze angles must be finite, got ({self.pitch}, {self.yaw})"
            )

    @classmethod
    def ingest(cls, pitch: float, yaw: float) -> "GazeLabel":
        """Build a label from dataset values, enforcing ingestion bounds."""
        label = cls(float(pitch), float(yaw))
        if not -math.pi / 2 <= label.pitch <= math.pi / 2:
            raise ValueError(f"pitch {label.pitch} outside [-pi/2, pi/2]")
        if not -math.pi <= label.yaw <= math.pi:
            raise ValueError(f"yaw {label.yaw} outside [-pi, pi]")
        return label

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float64)


@dataclass(frozen=True)
class GazeSample:
    """One image with an optional gaze label and a domain tag.

    Images are (H, W, C) float arrays with pixel values in [0, 1].
    Source samples must carry a label; target samples handed to the
    adaptation engine carry none (held-out target labels live inside the
    dataset handle and are only reachable from the evaluation harness).
    """

    image: np.ndarray
    label: GazeLabel | None
    domain: Domain

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"image must be (H, W, C), got shape {self.image.shape}")
        if self.domain is Domain.SOURCE and self.label is None:
            raise ValueError("source samples must carry a label")


class SampleBatch:
    """An ordered batch of samples sharing one domain tag."""

    def __init__(self, samples: list[GazeSample]):
        if not samples:
            raise ValueError("batch must be nonempty")
        domains = {s.domain for s in samples}
        if len(domains) != 1:
            raise ValueError("all samples in a batch must share a domain tag")
        self.samples = list(samples)
        self.domain = samples[0].domain

    @property
    def batch_size(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        """Stacked (B, H, W, C) float32 image array."""
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def labels(self) -> np.ndarray:
        """Stacked (B, 2) label array; raises if any sample is unlabeled."""
        if any(s.label is None for s in self.samples):
            raise ValueError("batch contains unlabeled samples")
        return np.stack([s.label.as_array() for s in self.samples])


def gaze_to_vector(label: GazeLabel) -> np.ndarray:
    """Convert a (pitch, yaw) label to a unit 3-vector."""
    p, y = label.pitch, label.yaw
    return np.array(
        [math.cos(p) * math.sin(y), math.sin(p), math.cos(p) * math.cos(y)],
        dtype=np.float64,
    )


def pitchyaw_to_vectors(angles: np.ndarray) -> np.ndarray:
    """Vectorized conversion of an (N, 2) pitch/yaw array to (N, 3) unit vectors."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.ndim != 2 or angles.shape[1] != 2:
        raise ValueError(f"expected (N, 2) array, got shape {angles.shape}")
    if not np.all(np.isfinite(angles)):
        raise ValueError("angles must be finite")
    pitch, yaw = angles[:, 0], angles[:, 1]
    cos_p = np.cos(pitch)
    return np.stack([cos_p * np.sin(yaw), np.sin(pitch), cos_p * np.cos(yaw)], axis=1)


def angular_error(pred: GazeLabel, truth: GazeLabel) -> float:
    """Angle in degrees between two gaze directions.

    The cosine is clamped into [-1, 1] before arccos so identical or
    antipodal directions cannot produce NaN from floating-point drift.
    """
    dot = float(np.dot(gaze_to_vector(pred), gaze_to_vector(truth)))
    return math.degrees(math.acos(max(-1.0, min(1.0, dot))))


def angular_error_batch(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-row angular error in degrees between (N, 2) pitch/yaw arrays."""
    vp = pitchyaw_to_vectors(pred)
    vt = pitchyaw_to_vectors(truth)
    dots = np.clip(np.sum(vp * vt, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def mean_angular_error(preds: list[GazeLabel], truths: list[GazeLabel]) -> float:
    """Arithmetic mean of per-sample angular errors, in degrees."""
    if not preds or not truths:
        raise ValueError("prediction and truth lists must be nonempty")
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(truths)}")
    pred_arr = np.stack([p.as_array() for p in preds])
    truth_arr = np.stack([t.as_array() for t in truths])
    return float(np.mean(angular_error_batch(pred_arr, truth_arr)))
