"""Synthetic labelled volumes: ellipsoidal blobs on a noisy background.

The foreground fraction (T/W) of every sample is forced into a requested
band by rejection: candidate layouts are redrawn until one lands inside it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GenerationError


@dataclass
class VolumeSample:
    image: np.ndarray            # [C_in, D, H, W] float64
    labels: np.ndarray           # [D, H, W] uint8
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = "sample"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.image.ndim != 4 or self.labels.ndim != 3:
            raise ConfigurationError(
                f"image must be [C, D, H, W] and labels [D, H, W], got "
                f"{self.image.shape} and {self.labels.shape}")
        if self.image.shape[1:] != self.labels.shape:
            raise ConfigurationError(
                f"image extents {self.image.shape[1:]} differ from labels {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def extents(self) -> tuple:
        return self.labels.shape

    def target_ratio(self) -> float:
        return float(np.count_nonzero(self.labels)) / self.labels.size

    def equals(self, other: "VolumeSample") -> bool:
        return (self.id == other.id and self.spacing == other.spacing
                and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class SynthSpec:
    extents: tuple = (24, 24, 24)
    class_count: int = 2
    blob_count: tuple = (1, 3)          # inclusive range
    radius: tuple = (2.0, 5.0)          # per-axis semi-axis range, voxels
    tw_band: tuple = (0.01, 0.2)
    contrast: float = 1.0
    noise: float = 0.3
    seed: int = 0
    in_channels: int = 1
    spacing: tuple = (1.0, 1.0, 1.0)
    max_retries: int = 500

    def __post_init__(self):
        for name in ("extents", "blob_count", "radius", "tw_band", "spacing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.tw_band
        if not 0 < lo < hi < 1:
            raise ConfigurationError(f"T/W band must satisfy 0 < lo < hi < 1, got {self.tw_band}")
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ConfigurationError(f"invalid extents {self.extents}")
        if self.class_count < 2 or self.class_count > 255:
            raise ConfigurationError("class_count must lie in [2, 255]")
        bmin, bmax = self.blob_count
        if not 1 <= bmin <= bmax:
            raise ConfigurationError(f"blob count range {self.blob_count} must start at >= 1")
        rmin, rmax = self.radius
        if not 0 < rmin <= rmax or 2 * rmax >= min(self.extents):
            raise ConfigurationError(
                f"radius range {self.radius} does not fit extents {self.extents}")
        if self.in_channels < 1 or self.max_retries < 1:
            raise ConfigurationError("in_channels and max_retries must be positive")

    def replace(self, **kw) -> "SynthSpec":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


def _draw_labels(spec: SynthSpec, rng: np.random.Generator, grid) -> np.ndarray:
    labels = np.zeros(spec.extents, dtype=np.uint8)
    n = rng.integers(spec.blob_count[0], spec.blob_count[1] + 1)
    for _ in range(n):
        radii = rng.uniform(*spec.radius, size=3)
        centre = [rng.uniform(r, e - 1 - r) for r, e in zip(radii, spec.extents)]
        cls = rng.integers(1, spec.class_count)
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0
        labels[inside] = cls
    return labels


def _render(spec: SynthSpec, labels, rng) -> np.ndarray:
    # each class gets its own mean level, channels share the layout with separate noise
    levels = spec.contrast * np.arange(spec.class_count) / (spec.class_count - 1)
    base = levels[labels]
    noise = rng.normal(0.0, spec.noise, (spec.in_channels,) + spec.extents)
    return base[None] + noise


def synth_generate(spec: SynthSpec, count: int) -> list[VolumeSample]:
    """``count`` samples, each deterministic in ``(spec.seed, index)``."""
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    lo, hi = spec.tw_band
    grid = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in spec.extents], indexing="ij")
    total = float(np.prod(spec.extents))
    out = []
    for i in range(count):
        rng = np.random.default_rng([spec.seed, i])
        for _ in range(spec.max_retries):
            labels = _draw_labels(spec, rng, grid)
            ratio = np.count_nonzero(labels) / total
            if lo <= ratio <= hi:
                break
        else:
            raise GenerationError(
                f"no layout within T/W band {spec.tw_band} after {spec.max_retries} draws "
                f"at extents {spec.extents}")
        image = _render(spec, labels, rng)
        out.append(VolumeSample(image, labels, spec.spacing, f"synth-{spec.seed}-{i:04d}"))
    return out
