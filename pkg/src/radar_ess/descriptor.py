"""Rotation-invariant range histogram of ellipse outlines.

Outline samples of every fitted ellipse are expressed in polar coordinates
about the image center and binned by range only, so any rotation of the
scene about the radar leaves the histogram unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .ccl import extract_clusters, filter_small, label_components
from .ellipse import DEFAULT_SAMPLES, Ellipse, fit_clusters, sample_outlines
from .frame_io import RadarFrame, binarize

DEFAULT_SIZE = 100
# base outline samples per ellipse; sample_count raises it to ceil(2 pi a), so
# each cluster weighs roughly its outline length in pixels
OUTLINE_SAMPLES = 8
# float noise tolerance when snapping ranges to bin edges
_BIN_EPS = 1e-9


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for an all-zero vector."""


@dataclass
class PolarPointSet:
    r: np.ndarray
    phi: np.ndarray

    def __len__(self):
        return len(self.r)


@dataclass
class EssDescriptor:
    v: np.ndarray
    cluster_count: int
    frame_id: int = 0
    session_id: str = ""

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.v.ndim != 1 or len(self.v) < 1:
            raise ValueError("descriptor vector must be 1-D and non-empty")

    @property
    def size(self) -> int:
        return len(self.v)

    def to_json(self) -> str:
        return json.dumps(
            {
                "session_id": self.session_id,
                "frame_id": int(self.frame_id),
                "cluster_count": int(self.cluster_count),
                "v": [float(x) for x in self.v],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "EssDescriptor":
        rec = json.loads(line)
        return cls(
            v=np.asarray(rec["v"], dtype=np.float64),
            cluster_count=int(rec["cluster_count"]),
            frame_id=int(rec["frame_id"]),
            session_id=str(rec["session_id"]),
        )


@dataclass
class DescriptorConfig:
    size: int = DEFAULT_SIZE
    max_range: Optional[float] = None  # pixels; None = half the image diagonal
    samples_per_ellipse: int = OUTLINE_SAMPLES
    binarize_threshold: int = 0
    min_cluster_area: int = 1

    def resolved_max_range(self, width: int, height: int) -> float:
        if self.max_range is not None:
            return float(self.max_range)
        return default_max_range(width, height)


def default_max_range(width: int, height: int) -> float:
    return 0.5 * math.hypot(width, height)


def image_center(width: int, height: int) -> tuple[float, float]:
    return (width - 1) / 2.0, (height - 1) / 2.0


def polar_from_points(points: np.ndarray, center: tuple[float, float]) -> PolarPointSet:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dx = pts[:, 0] - center[0]
    dy = pts[:, 1] - center[1]
    phi = np.arctan2(dy, dx)
    phi[phi == -np.pi] = np.pi
    return PolarPointSet(r=np.hypot(dx, dy), phi=phi)


def to_polar(
    ellipses: Sequence[Ellipse],
    center: tuple[float, float],
    samples_per_ellipse: int = DEFAULT_SAMPLES,
) -> PolarPointSet:
    """Polar coordinates of the continuous outline samples of ``ellipses``."""
    return polar_from_points(sample_outlines(ellipses, samples_per_ellipse), center)


def range_histogram(r: np.ndarray, max_range: float, size: int) -> np.ndarray:
    if size < 1:
        raise ValueError(f"descriptor size must be >= 1, got {size}")
    if not max_range > 0:
        raise ValueError(f"max_range must be positive, got {max_range}")
    r = np.asarray(r, dtype=np.float64)
    bins = np.floor(r * (size / max_range) + _BIN_EPS).astype(np.int64)
    bins = bins[(bins >= 0) & (bins < size)]
    return np.bincount(bins, minlength=size).astype(np.float64)


def make_descriptor(
    points: PolarPointSet,
    max_range: float,
    size: int,
    cluster_count: int,
    frame_id: int = 0,
    session_id: str = "",
) -> EssDescriptor:
    """Histogram outline samples into ``size`` equal range bins.

    Samples at or beyond ``max_range`` are dropped.
    """
    v = range_histogram(points.r, max_range, size)
    return EssDescriptor(v=v, cluster_count=cluster_count, frame_id=frame_id, session_id=session_id)


def cosine_distance(u, w) -> float:
    a = u.v if isinstance(u, EssDescriptor) else np.asarray(u, dtype=np.float64)
    b = w.v if isinstance(w, EssDescriptor) else np.asarray(w, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    d = 1.0 - float(a @ b) / (na * nb)
    return min(max(d, 0.0), 2.0)


@dataclass
class FrameFeatures:
    """Intermediate products of the descriptor pipeline for one frame."""

    ellipses: list[Ellipse]
    cluster_count: int
    descriptor: EssDescriptor


def extract_ellipses(frame: RadarFrame, config: DescriptorConfig) -> list[Ellipse]:
    mask = binarize(frame, config.binarize_threshold)
    label_map = filter_small(label_components(mask), config.min_cluster_area)
    return fit_clusters(extract_clusters(label_map))


def describe_ellipses(
    ellipses: Sequence[Ellipse],
    width: int,
    height: int,
    config: DescriptorConfig,
    frame_id: int = 0,
    session_id: str = "",
) -> EssDescriptor:
    points = to_polar(ellipses, image_center(width, height), config.samples_per_ellipse)
    return make_descriptor(
        points,
        config.resolved_max_range(width, height),
        config.size,
        len(ellipses),
        frame_id=frame_id,
        session_id=session_id,
    )


def describe_frame(frame: RadarFrame, config: DescriptorConfig = None, session_id: str = "") -> FrameFeatures:
    """Full pipeline: binarize, label, fit ellipses, polar histogram."""
    config = config or DescriptorConfig()
    ellipses = extract_ellipses(frame, config)
    desc = describe_ellipses(
        ellipses, frame.width, frame.height, config, frame_id=frame.frame_id, session_id=session_id
    )
    return FrameFeatures(ellipses=ellipses, cluster_count=len(ellipses), descriptor=desc)


def write_jsonl(path, descriptors: Iterable[EssDescriptor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in descriptors:
            fh.write(d.to_json())
            fh.write("\n")
    return path


def read_jsonl(path) -> Iterator[EssDescriptor]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield EssDescriptor.from_json(line)
