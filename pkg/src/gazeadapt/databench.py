"""Synthetic domain-shift data, dataset handles, and the evaluation harness.

The synthetic renderer draws a parametric eye: a dark anti-aliased iris
disk on a textured bright background, where the iris offset from the
image center encodes (pitch, yaw) linearly. Because the encoding is
linear and noise-free images are symmetric, a centroid decoder recovers
the label in closed form, which makes end-to-end adaptation claims
checkable without any licensed data. Domain-shift knobs are gaze range,
brightness, pixel noise, and texture seed.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Domain, GazeLabel, GazeSample, SampleBatch

# Iris offset in pixels per radian of gaze, relative to image size 32.
PIXELS_PER_RADIAN_AT_32 = 8.0
IRIS_RADIUS_AT_32 = 5.0


class ContractViolation(RuntimeError):
    """A consumer touched labels it was not allowed to see."""


class IngestionError(ValueError):
    """A dataset directory or label file could not be ingested."""


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Parameters of one synthetic domain.

    gaze_range is (pitch_span, yaw_span) in radians, centered at zero;
    illumination is (brightness_mean, brightness_std).
    """

    gaze_range: tuple[float, float]
    illumination: tuple[float, float]
    noise_std: float
    texture_seed: int
    n_images: int
    renderer: str = "parametric_eye"
    image_size: int = 32

    def __post_init__(self):
        if self.renderer != "parametric_eye":
            raise ValueError(f"unknown renderer {self.renderer!r}")
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        p_span, y_span = self.gaze_range
        if p_span <= 0 or y_span <= 0:
            raise ValueError("gaze spans must be positive")
        if p_span > math.pi or y_span > 2 * math.pi:
            raise ValueError("gaze spans exceed the representable angle ranges")
        # the rendered iris must stay inside the frame at the extreme labels
        scale = self.image_size / 32.0
        k = PIXELS_PER_RADIAN_AT_32 * scale
        r = IRIS_RADIUS_AT_32 * scale
        max_off = max(p_span, y_span) / 2.0 * k
        if max_off + r + 1.5 > self.image_size / 2.0:
            raise ValueError(
                f"gaze_range {self.gaze_range} too wide for image_size {self.image_size}: "
                "iris would leave the frame"
            )


def check_domain_shift(source: SyntheticDomainSpec, target: SyntheticDomainSpec) -> None:
    """Require the source gaze range to strictly contain the target's."""
    for axis, (s, t) in enumerate(zip(source.gaze_range, target.gaze_range)):
        if not t < s:
            raise ValueError(
                f"target gaze span {t} on axis {axis} must be strictly inside source span {s}"
            )


class DatasetHandle:
    """Indexable source of gaze samples with a label-visibility contract.

    Hidden handles serve samples without labels and raise
    ContractViolation on any label access; only the evaluation harness
    should work with visible handles of held-out target data. The handle
    counts distinct images served (access_counter) and successful label
    reads (label_access_count) so budget and leak audits are cheap.
    """

    def __init__(self, images, labels, domain: Domain, label_visibility: str = "visible",
                 name: str = "dataset"):
        if label_visibility not in ("visible", "hidden"):
            raise ValueError(f"unknown label visibility {label_visibility!r}")
        if labels is not None and len(labels) != len(images):
            raise ValueError("images and labels must have equal length")
        self._images = list(images)
        self._labels = list(labels) if labels is not None else [None] * len(self._images)
        self.domain = domain
        self.label_visibility = label_visibility
        self.name = name
        self._served: set[int] = set()
        self.label_access_count = 0

    def __len__(self) -> int:
        return len(self._images)

    @property
    def access_counter(self) -> int:
        """Number of distinct images served so far."""
        return len(self._served)

    def has_labels(self) -> bool:
        return all(l is not None for l in self._labels) and len(self._labels) > 0

    def label_of(self, index: int) -> GazeLabel:
        if self.label_visibility == "hidden":
            raise ContractViolation(
                f"label access on hidden handle {self.name!r} (index {index})"
            )
        label = self._labels[index]
        if label is None:
            raise ValueError(f"sample {index} of {self.name!r} has no label")
        self.label_access_count += 1
        return label

    def get_sample(self, index: int) -> GazeSample:
        self._served.add(int(index))
        label = self._labels[index] if self.label_visibility == "visible" else None
        return GazeSample(image=self._images[index], label=label, domain=self.domain)

    def get_batch(self, indices) -> SampleBatch:
        return SampleBatch([self.get_sample(i) for i in indices])

    def __iter__(self):
        for i in range(len(self)):
            yield self.get_sample(i)

    def subset(self, indices, name: str | None = None) -> "DatasetHandle":
        """New handle over a subset of the data, with fresh counters."""
        return DatasetHandle(
            [self._images[i] for i in indices],
            [self._labels[i] for i in indices],
            self.domain,
            self.label_visibility,
            name or f"{self.name}/subset",
        )

    def hidden(self) -> "DatasetHandle":
        """View of the same data with labels hidden and fresh counters."""
        return DatasetHandle(self._images, self._labels, self.domain, "hidden",
                             f"{self.name}/hidden")

    def evaluation_pairs(self):
        """All (image, label) pairs, for the evaluation harness only."""
        if self.label_visibility == "hidden":
            raise ContractViolation(
                f"evaluation access on hidden handle {self.name!r}"
            )
        if not self.has_labels():
            raise ValueError(f"handle {self.name!r} has unlabeled samples")
        self.label_access_count += len(self._labels)
        self._served.update(range(len(self)))
        return list(self._images), list(self._labels)


def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency multiplicative texture field in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
    # bilinear upsample of the coarse grid
    xs = np.linspace(0, 3, size)
    x0 = np.clip(xs.astype(int), 0, 2)
    frac = xs - x0
    rows = (coarse[x0, :] * (1 - frac)[:, None] + coarse[x0 + 1, :] * frac[:, None])
    cols = (rows[:, x0] * (1 - frac)[None, :] + rows[:, x0 + 1] * frac[None, :])
    return cols


def render_eye(label: GazeLabel, brightness: float, texture: np.ndarray,
               noise: np.ndarray | None, image_size: int) -> np.ndarray:
    """Render one parametric-eye image for a gaze label; returns (H, W, 1) float32."""
    scale = image_size / 32.0
    k = PIXELS_PER_RADIAN_AT_32 * scale
    radius = IRIS_RADIUS_AT_32 * scale
    center = (image_size - 1) / 2.0
    row_c = center - label.pitch * k  # looking up moves the iris up
    col_c = center + label.yaw * k
    rows = np.arange(image_size, dtype=np.float64)[:, None]
    cols = np.arange(image_size, dtype=np.float64)[None, :]
    dist = np.sqrt((rows - row_c) ** 2 + (cols - col_c) ** 2)
    weight = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # 1 px anti-aliased edge
    background = brightness * (1.0 + 0.08 * texture)
    iris_level = 0.22 * brightness
    img = background * (1.0 - weight) + iris_level * weight
    if noise is not None:
        img = img + noise
    return np.clip(img, 0.0, 1.0)[:, :, None].astype(np.float32)


def decode_eye(image: np.ndarray) -> GazeLabel:
    """Closed-form centroid decoder for noise-free parametric-eye images."""
    img = image[:, :, 0].astype(np.float64)
    size = img.shape[0]
    threshold = 0.5 * (img.min() + img.max())
    weight = np.clip(threshold - img, 0.0, None)
    total = weight.sum()
    if total <= 0:
        raise ValueError("image contains no decodable iris")
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    row_c = float((weight * rows).sum() / total)
    col_c = float((weight * cols).sum() / total)
    scale = size / 32.0
    k = PIXELS_PER_RADIAN_AT_32 * scale
    center = (size - 1) / 2.0
    return GazeLabel(pitch=(center - row_c) / k, yaw=(col_c - center) / k)


def generate_domain(spec: SyntheticDomainSpec, domain: Domain = Domain.SOURCE,
                    name: str | None = None) -> DatasetHandle:
    """Render a seeded synthetic domain; identical specs give identical data."""
    rng = np.random.default_rng(spec.texture_seed)
    p_span, y_span = spec.gaze_range
    b_mean, b_std = spec.illumination
    images, labels = [], []
    for _ in range(spec.n_images):
        label = GazeLabel.ingest(
            rng.uniform(-p_span / 2.0, p_span / 2.0),
            rng.uniform(-y_span / 2.0, y_span / 2.0),
        )
        brightness = float(np.clip(rng.normal(b_mean, b_std), 0.15, 1.0))
        texture = _smooth_texture(rng, spec.image_size)
        noise = (
            rng.normal(0.0, spec.noise_std, size=(spec.image_size, spec.image_size))
            if spec.noise_std > 0 else None
        )
        images.append(render_eye(label, brightness, texture, noise, spec.image_size))
        labels.append(label)
    return DatasetHandle(images, labels, domain, "visible",
                         name or f"synthetic(seed={spec.texture_seed})")


def ingest_directory(path, label_file) -> DatasetHandle:
    """Load pre-normalized images listed in a label file.

    Label file format: one row per image, `relative_path pitch_rad yaw_rad`,
    space-separated, UTF-8. Blank lines are ignored.
    """
    root = Path(path)
    images, labels = [], []
    missing = []
    with open(label_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise IngestionError(
                    f"{label_file}:{lineno}: expected 'path pitch yaw', got {line!r}"
                )
            rel, pitch_s, yaw_s = parts
            try:
                label = GazeLabel.ingest(float(pitch_s), float(yaw_s))
            except ValueError as exc:
                raise IngestionError(f"{label_file}:{lineno}: {exc}") from exc
            img_path = root / rel
            if not img_path.is_file():
                missing.append(f"line {lineno}: {rel}")
                continue
            with Image.open(img_path) as im:
                arr = np.asarray(im, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[:, :, None]
            images.append(arr)
            labels.append(label)
    if missing:
        raise IngestionError(
            f"{len(missing)} referenced image(s) missing under {root}: " + "; ".join(missing)
        )
    return DatasetHandle(images, labels, Domain.SOURCE, "visible", str(root))


def save_domain(handle: DatasetHandle, directory) -> Path:
    """Write a labeled handle as PNG files plus a label file (lossless 8-bit)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    images, labels = handle.evaluation_pairs()
    for i, (img, label) in enumerate(zip(images, labels)):
        rel = f"img_{i:05d}.png"
        arr = np.round(img[:, :, 0] * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(directory / rel)
        lines.append(f"{rel} {label.pitch:.9f} {label.yaw:.9f}")
    with open(directory / "labels.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return directory


def evaluate(model, data: DatasetHandle, batch_size: int = 64):
    """Mean angular error of a model over a labeled handle.

    Returns (mean_error_degrees, per_sample_errors). The model is called
    on (B, C, H, W) float tensors and must return (B, 2) pitch/yaw.
    """
    import torch

    from .core import angular_error_batch

    if data.label_visibility != "visible" or not data.has_labels():
        raise ValueError(f"evaluation requires visible labels on {data.name!r}")
    images, labels = data.evaluation_pairs()
    truth = np.stack([l.as_array() for l in labels])
    if hasattr(model, "eval"):
        model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.stack(images[start:start + batch_size]).astype(np.float32)
            tensor = torch.from_numpy(np.ascontiguousarray(chunk.transpose(0, 3, 1, 2)))
            out = model(tensor)
            preds.append(np.asarray(out.detach().cpu(), dtype=np.float64))
    pred_arr = np.concatenate(preds, axis=0)
    errors = angular_error_batch(pred_arr, truth)
    return float(errors.mean()), errors


def improvement_report(before: float, after: float) -> float:
    """Percent error reduction relative to a baseline; negative means worse."""
    if not (math.isfinite(before) and before > 0):
        raise ValueError(f"baseline error must be finite and > 0, got {before}")
    if not math.isfinite(after):
        raise ValueError(f"adapted error must be finite, got {after}")
    return 100.0 * (before - after) / before
