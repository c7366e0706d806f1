"""Radar frame loading, saving and binarization.

Frames are single-channel PGM or PNG images (8 or 16 bit).  Per-session
metadata lives in a CSV with header ``frame_id,timestamp,x,y,resolution``;
the pose columns may be blank for unlabeled sessions.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

METADATA_FILENAME = "metadata.csv"
METADATA_FIELDS = ("frame_id", "timestamp", "x", "y", "resolution")
FRAME_EXTENSIONS = (".png", ".pgm")


class FrameFormatError(ValueError):
    """Raised when an image or metadata record cannot be turned into a frame."""


@dataclass(frozen=True)
class Pose:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose must be finite, got ({self.x}, {self.y})")

    def distance(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class FrameMeta:
    """One row of a session metadata CSV.

    ``width``/``height`` are optional; when given, ``load_frame`` checks the
    image dimensions against them.
    """

    frame_id: int
    timestamp: float
    resolution: float
    pose: Optional[Pose] = None
    width: Optional[int] = None
    height: Optional[int] = None


@dataclass
class RadarFrame:
    """Cartesian radar intensity image.

    ``intensities`` is a ``(height, width)`` array of ``uint8`` or ``uint16``;
    pixel ``(x, y)`` is ``intensities[y, x]``.
    """

    frame_id: int
    timestamp: float
    resolution: float
    intensities: np.ndarray
    pose: Optional[Pose] = None

    def __post_init__(self):
        arr = np.asarray(self.intensities)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise FrameFormatError(f"intensities must be a non-empty 2D grid, got shape {arr.shape}")
        if arr.dtype not in (np.uint8, np.uint16):
            raise FrameFormatError(f"intensities must be uint8 or uint16, got {arr.dtype}")
        if not self.resolution > 0:
            raise FrameFormatError(f"resolution must be positive, got {self.resolution}")
        self.intensities = arr

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]


@dataclass
class BinaryImage:
    mask: np.ndarray  # (height, width) bool

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


def read_image(path) -> np.ndarray:
    """Read a single-channel image, preserving its native bit depth."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such frame: {path}")
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if arr.ndim != 2:
        raise FrameFormatError(f"{path}: expected a single-channel image, got mode {mode!r}")
    if arr.dtype == np.uint8 or arr.dtype == np.uint16:
        return arr
    if mode == "1":
        return arr.astype(np.uint8)
    # 16-bit PGM decodes as int32 ("I")
    if np.issubdtype(arr.dtype, np.integer) and arr.min(initial=0) >= 0 and arr.max(initial=0) <= 0xFFFF:
        return arr.astype(np.uint16)
    raise FrameFormatError(f"{path}: unsupported pixel format {mode!r}")


def load_frame(path, meta: FrameMeta) -> RadarFrame:
    arr = read_image(path)
    h, w = arr.shape
    if (meta.width is not None and meta.width != w) or (meta.height is not None and meta.height != h):
        raise FrameFormatError(
            f"{path}: image is {w}x{h} but metadata says {meta.width}x{meta.height}"
        )
    return RadarFrame(
        frame_id=meta.frame_id,
        timestamp=meta.timestamp,
        resolution=meta.resolution,
        intensities=arr,
        pose=meta.pose,
    )


def save_frame(frame: RadarFrame, path) -> Path:
    path = Path(path)
    if path.suffix.lower() not in FRAME_EXTENSIONS:
        raise FrameFormatError(f"unsupported frame extension {path.suffix!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.intensities).save(path)
    return path


def binarize(frame: RadarFrame, threshold: int = 0) -> BinaryImage:
    """Detection mask: pixels strictly brighter than ``threshold``."""
    info = np.iinfo(frame.intensities.dtype)
    if not info.min <= threshold <= info.max:
        raise ValueError(f"threshold {threshold} outside {frame.intensities.dtype} range")
    return BinaryImage(frame.intensities > threshold)


def frame_filename(frame_id: int, ext: str = ".png") -> str:
    return f"frame_{frame_id:06d}{ext}"


def _parse_float(value: Optional[str]) -> Optional[float]:
    if value is None or value.strip() == "":
        return None
    return float(value)


def read_metadata(path) -> list[FrameMeta]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"frame_id", "timestamp", "resolution"} - set(reader.fieldnames or ())
        if missing:
            raise FrameFormatError(f"{path}: missing metadata columns {sorted(missing)}")
        for rec in reader:
            x, y = _parse_float(rec.get("x")), _parse_float(rec.get("y"))
            pose = Pose(x, y) if x is not None and y is not None else None
            width, height = _parse_float(rec.get("width")), _parse_float(rec.get("height"))
            rows.append(
                FrameMeta(
                    frame_id=int(rec["frame_id"]),
                    timestamp=float(rec["timestamp"]),
                    resolution=float(rec["resolution"]),
                    pose=pose,
                    width=None if width is None else int(width),
                    height=None if height is None else int(height),
                )
            )
    return rows


def write_metadata(path, metas: Sequence[FrameMeta]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_FIELDS)
        for m in metas:
            x = "" if m.pose is None else repr(m.pose.x)
            y = "" if m.pose is None else repr(m.pose.y)
            writer.writerow([m.frame_id, repr(m.timestamp), x, y, repr(m.resolution)])
    return path


def find_frame_file(session_dir, frame_id: int) -> Path:
    session_dir = Path(session_dir)
    for ext in FRAME_EXTENSIONS:
        candidate = session_dir / frame_filename(frame_id, ext)
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"{session_dir}: no image for frame {frame_id}")


def iter_session(session_dir, stride: int = 1) -> Iterator[RadarFrame]:
    """Yield every ``stride``-th frame of a session directory in CSV order."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    session_dir = Path(session_dir)
    metas = read_metadata(session_dir / METADATA_FILENAME)
    for meta in metas[::stride]:
        yield load_frame(find_frame_file(session_dir, meta.frame_id), meta)


def write_session(session_dir, frames: Sequence[RadarFrame], ext: str = ".png") -> Path:
    session_dir = Path(session_dir)
    session_dir.mkdir(parents=True, exist_ok=True)
    for f in frames:
        save_frame(f, session_dir / frame_filename(f.frame_id, ext))
    metas = [FrameMeta(f.frame_id, f.timestamp, f.resolution, f.pose) for f in frames]
    return write_metadata(session_dir / METADATA_FILENAME, metas)


def save_debug_pgm(grid: np.ndarray, path) -> Path:
    """Dump a label map or boolean mask as a 16-bit PGM for inspection."""
    arr = np.asarray(grid)
    if arr.dtype == bool:
        arr = arr.astype(np.uint16) * 0xFFFF
    if arr.max(initial=0) > 0xFFFF:
        logger.warning("debug dump of %s clipped to 16 bits", path)
    arr = np.clip(arr, 0, 0xFFFF).astype(np.uint16)
    path = Path(path)
    Image.fromarray(arr).save(path, format="PPM")
    return path
