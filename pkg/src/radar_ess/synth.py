"""Synthetic maritime radar scenes with known ground truth.

Static landmasses are Gaussian blobs cut at a Mahalanobis level, drawn
into an ego-centred Cartesian grid rotated by the vessel heading.  Every
frame perturbs each blob's cut level and dilates or erodes it by a few
pixels, so the same place never produces quite the same outline.
Anchorage zones hold a fixed number of vessels whose positions are redrawn
on every pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .ellipse import rasterize
from .frame_io import Pose, RadarFrame

MOANA_RESOLUTION = 3.25  # m/px
MOANA_MAX_RANGE = 3328.0  # m
BLIND_RANGE = 75.0  # m


class SceneError(ValueError):
    """Invalid scene or trajectory definition."""


@dataclass
class StaticBlob:
    center: tuple[float, float]  # m
    cov: tuple[tuple[float, float], tuple[float, float]]  # m^2
    intensity: int = 200


@dataclass
class Anchorage:
    center: tuple[float, float]
    radius: float
    vessel_count: int
    vessel_size: float  # hull length, m
    intensity: int = 220


@dataclass
class Scene:
    static_blobs: list[StaticBlob] = field(default_factory=list)
    anchorages: list[Anchorage] = field(default_factory=list)
    bounds: tuple[float, float, float, float] = (-5000.0, -5000.0, 5000.0, 5000.0)

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise SceneError(f"degenerate bounds {self.bounds}")
        for z in self.anchorages:
            if z.vessel_count < 0:
                raise SceneError("vessel_count must be >= 0")
            if z.radius <= 0 or z.vessel_size <= 0:
                raise SceneError("anchorage radius and vessel_size must be positive")
            cx, cy = z.center
            if not (xmin <= cx - z.radius and cx + z.radius <= xmax and ymin <= cy - z.radius and cy + z.radius <= ymax):
                raise SceneError(f"anchorage at {z.center} extends outside the world bounds")
        for b in self.static_blobs:
            cov = np.asarray(b.cov, dtype=float)
            if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
                raise SceneError(f"blob covariance must be symmetric positive definite, got {b.cov}")

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        try:
            blobs = [
                StaticBlob(tuple(map(float, b["center"])), tuple(tuple(map(float, r)) for r in b["cov"]),
                           int(b.get("intensity", 200)))
                for b in data.get("static_blobs", [])
            ]
            zones = [
                Anchorage(tuple(map(float, z["center"])), float(z["radius"]), int(z["vessel_count"]),
                          float(z["vessel_size"]), int(z.get("intensity", 220)))
                for z in data.get("anchorages", [])
            ]
            bounds = tuple(map(float, data.get("bounds", Scene.bounds)))
            if len(bounds) != 4:
                raise SceneError("bounds must be [xmin, ymin, xmax, ymax]")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(f"invalid scene definition: {exc}") from exc
        return cls(blobs, zones, bounds)


@dataclass
class TrajectorySample:
    timestamp: float
    x: float
    y: float
    heading: float  # rad, image x axis direction in the world frame
    pass_id: int = 0

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y)


@dataclass
class Trajectory:
    samples: list[TrajectorySample]

    def __post_init__(self):
        ts = [s.timestamp for s in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SceneError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.samples)

    def to_dict(self) -> dict:
        return {"samples": [asdict(s) for s in self.samples]}

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        try:
            samples = [
                TrajectorySample(float(s["timestamp"]), float(s["x"]), float(s["y"]), float(s["heading"]),
                                 int(s.get("pass_id", 0)))
                for s in data["samples"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"invalid trajectory definition: {exc}") from exc
        return cls(samples)


@dataclass
class FrameConfig:
    """Frame geometry and boundary fluctuation.

    Defaults mirror MOANA (2048 px at 3.25 m/px).  ``small()`` keeps the
    same coverage at 512 px for fast runs.
    """

    size_px: int = 2048
    resolution: float = MOANA_RESOLUTION
    blind_range: float = BLIND_RANGE
    cut_level: float = 2.0  # Mahalanobis radius at which a blob is cut
    fluctuation: float = 0.1  # relative jitter of the cut level per blob and frame
    morph_radius: int = 1  # max dilation/erosion per blob and frame, px
    speckle: float = 0.5  # relative per-pixel return-strength jitter; never clears a detection
    vessel_aspect: float = 0.5  # beam / length of a vessel return, widened by beam spread

    def __post_init__(self):
        if self.size_px < 1 or not self.resolution > 0:
            raise SceneError("frame size and resolution must be positive")
        if not (0.0 <= self.fluctuation < 1.0 and 0.0 <= self.speckle < 1.0):
            raise SceneError("fluctuation and speckle must be in [0, 1)")
        if self.morph_radius < 0 or not self.cut_level > 0 or not 0.0 < self.vessel_aspect <= 1.0:
            raise SceneError("invalid blob shape settings")

    @property
    def max_range(self) -> float:
        return self.size_px * self.resolution / 2.0

    @classmethod
    def small(cls, size_px: int = 512, **kw) -> "FrameConfig":
        return cls(size_px=size_px, resolution=2 * MOANA_MAX_RANGE / size_px, **kw)


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def vessel_layout(zone: Anchorage, zone_index: int, pass_id: int, seed: int, cut_level: float,
                  aspect: float) -> list[StaticBlob]:
    """Vessel blobs of one anchorage for one pass, without mutual overlap."""
    rng = np.random.default_rng([seed, 1000 + zone_index, pass_id])
    sigma_long = zone.vessel_size / (2.0 * cut_level)
    sigma_beam = max(sigma_long * aspect, 1.0)
    spacing = zone.vessel_size * 1.2
    placed: list[np.ndarray] = []
    blobs = []
    attempts = 0
    while len(blobs) < zone.vessel_count:
        attempts += 1
        if attempts > 1000 * max(zone.vessel_count, 1):
            raise SceneError(f"anchorage {zone_index} too small for {zone.vessel_count} vessels")
        rad = zone.radius * math.sqrt(rng.random())
        ang = 2 * math.pi * rng.random()
        p = np.array(zone.center) + rad * np.array([math.cos(ang), math.sin(ang)])
        if any(np.hypot(*(p - q)) < spacing for q in placed):
            continue
        placed.append(p)
        r = _rot(math.pi * rng.random())
        cov = r @ np.diag([sigma_long ** 2, sigma_beam ** 2]) @ r.T
        blobs.append(StaticBlob((float(p[0]), float(p[1])), tuple(map(tuple, cov)), zone.intensity))
    return blobs


def scene_blobs(scene: Scene, pass_id: int, seed: int, config: FrameConfig) -> list[StaticBlob]:
    blobs = list(scene.static_blobs)
    for i, zone in enumerate(scene.anchorages):
        blobs.extend(vessel_layout(zone, i, pass_id, seed, config.cut_level, config.vessel_aspect))
    return blobs


def _render_blob(image: np.ndarray, blob: StaticBlob, pose: tuple[float, float], heading: float,
                 config: FrameConfig, level: float, morph: int) -> None:
    n = config.size_px
    res = config.resolution
    c0 = (n - 1) / 2.0
    world_to_local = _rot(-heading)
    center = world_to_local @ (np.asarray(blob.center) - np.asarray(pose)) / res + c0
    cov = world_to_local @ np.asarray(blob.cov) @ world_to_local.T / res ** 2
    reach = level * math.sqrt(np.linalg.eigvalsh(cov).max()) + abs(morph) + 2
    x0, x1 = int(math.floor(center[0] - reach)), int(math.ceil(center[0] + reach))
    y0, y1 = int(math.floor(center[1] - reach)), int(math.ceil(center[1] + reach))
    if x1 < 0 or y1 < 0 or x0 >= n or y0 >= n:
        return
    # margin keeps erosion from eating in at the clipped edge
    margin = abs(morph) + 1
    x0, y0 = max(x0, -margin), max(y0, -margin)
    x1, y1 = min(x1, n - 1 + margin), min(y1, n - 1 + margin)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    d = np.stack([xs - center[0], ys - center[1]], axis=-1)
    m2 = np.einsum("...i,ij,...j->...", d, np.linalg.inv(cov), d)
    patch = m2 <= level * level
    if morph > 0:
        patch = ndimage.binary_dilation(patch, structure=np.ones((3, 3), bool), iterations=morph)
    elif morph < 0:
        patch = ndimage.binary_erosion(patch, structure=np.ones((3, 3), bool), iterations=-morph)
    value = np.clip(np.rint(blob.intensity * np.exp(-0.5 * np.minimum(m2, level * level))), 1, 255)
    value = np.where(patch, value, 0).astype(image.dtype)
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, n - 1), min(y1, n - 1)
    sub = value[cy0 - y0:cy1 - y0 + 1, cx0 - x0:cx1 - x0 + 1]
    view = image[cy0:cy1 + 1, cx0:cx1 + 1]
    np.maximum(view, sub, out=view)


def _coverage_mask(config: FrameConfig) -> np.ndarray:
    n = config.size_px
    c0 = (n - 1) / 2.0
    ys, xs = np.mgrid[0:n, 0:n]
    r = np.hypot(xs - c0, ys - c0) * config.resolution
    return (r >= config.blind_range) & (r <= config.max_range)


def render_frame(
    scene: Scene,
    pose: tuple[float, float],
    heading: float,
    config: FrameConfig = None,
    seed: int = 0,
    pass_id: int = 0,
    frame_id: int = 0,
    timestamp: float = 0.0,
    scene_seed: Optional[int] = None,
) -> RadarFrame:
    """Render one radar frame seen from ``pose`` with the given heading.

    ``seed`` drives the per-frame boundary fluctuation; ``scene_seed``
    (default ``seed``) drives the anchorage layout of ``pass_id``.
    """
    config = config or FrameConfig()
    scene_seed = seed if scene_seed is None else scene_seed
    if not scene.contains(*pose):
        raise SceneError(f"pose {pose} outside world bounds {scene.bounds}")
    n = config.size_px
    image = np.zeros((n, n), dtype=np.uint8)
    rng = np.random.default_rng([seed, 77])
    for blob in scene_blobs(scene, pass_id, scene_seed, config):
        level = config.cut_level * (1.0 + config.fluctuation * rng.uniform(-1.0, 1.0))
        morph = int(rng.integers(-config.morph_radius, config.morph_radius + 1)) if config.morph_radius else 0
        _render_blob(image, blob, pose, heading, config, level, morph)
    if config.speckle > 0:
        gain = np.random.default_rng([seed, 78]).uniform(1.0 - config.speckle, 1.0 + config.speckle, image.shape)
        image = np.where(image > 0, np.clip(np.rint(image * gain), 1, 255), 0).astype(np.uint8)
    image[~_coverage_mask(config)] = 0
    return RadarFrame(
        frame_id=frame_id,
        timestamp=timestamp,
        resolution=config.resolution,
        intensities=image,
        pose=Pose(float(pose[0]), float(pose[1])),
    )


def has_revisit(trajectory: Trajectory, distance: float, min_gap: int) -> bool:
    pts = np.array([[s.x, s.y] for s in trajectory.samples])
    for i in range(len(pts)):
        j = i + min_gap
        if j < len(pts) and (np.hypot(*(pts[j:] - pts[i]).T) <= distance).any():
            return True
    return False


def make_loop_sequence(
    scene: Scene,
    trajectory: Trajectory,
    config: FrameConfig = None,
    seed: int = 0,
    revisit_distance: float = 100.0,
    min_gap: int = 10,
) -> list[RadarFrame]:
    """Render every trajectory sample; frame ids are sample indices."""
    config = config or FrameConfig()
    for s in trajectory.samples:
        if not scene.contains(s.x, s.y):
            raise SceneError(f"trajectory leaves the world bounds at ({s.x:.1f}, {s.y:.1f})")
    if not has_revisit(trajectory, revisit_distance, min_gap):
        raise SceneError(f"trajectory never revisits a place within {revisit_distance} m")
    return [
        render_frame(scene, (s.x, s.y), s.heading, config, seed=hash_seed(seed, i), pass_id=s.pass_id,
                     frame_id=i, timestamp=s.timestamp, scene_seed=seed)
        for i, s in enumerate(trajectory.samples)
    ]


def hash_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def loop_trajectory(
    center: tuple[float, float],
    radii: tuple[float, float],
    frames_per_pass: int = 100,
    passes: int = 2,
    reverse_alternate: bool = False,
    lateral_offset: float = 0.0,
    heading_noise: float = math.radians(5.0),
    along_jitter: float = 0.0,
    dt: float = 2.5,
    seed: int = 0,
) -> Trajectory:
    """Repeated laps of an elliptical route.

    Later passes are shifted sideways by up to ``lateral_offset`` meters
    (varying along the lap) and, with ``reverse_alternate``, every other
    pass runs the route backwards so revisits see the scene rotated by
    roughly half a turn.
    """
    rng = np.random.default_rng([seed, 5])
    cx, cy = center
    rx, ry = radii
    samples = []
    perimeter = math.pi * (3 * (rx + ry) - math.sqrt((3 * rx + ry) * (rx + 3 * ry)))
    for k in range(passes):
        backwards = reverse_alternate and k % 2 == 1
        phase = rng.uniform(0, 2 * math.pi)
        for i in range(frames_per_pass):
            s = i / frames_per_pass
            if backwards:
                s = -s
            s += along_jitter / perimeter * rng.uniform(-1, 1)
            t = 2 * math.pi * s
            px, py = cx + rx * math.cos(t), cy + ry * math.sin(t)
            tx, ty = -rx * math.sin(t), ry * math.cos(t)
            if backwards:
                tx, ty = -tx, -ty
            norm = math.hypot(tx, ty)
            nx, ny = ty / norm, -tx / norm
            off = 0.0
            if k > 0 and lateral_offset:
                off = lateral_offset * 0.5 * (1 + math.sin(3 * t + phase))
            heading = math.atan2(ty, tx) + rng.normal(0.0, heading_noise)
            samples.append(
                TrajectorySample(
                    timestamp=(k * frames_per_pass + i) * dt,
                    x=px + off * nx,
                    y=py + off * ny,
                    heading=float(math.remainder(heading, 2 * math.pi)),
                    pass_id=k,
                )
            )
    return Trajectory(samples)


def _blob(x, y, sx, sy, angle_deg=0.0, intensity=200) -> StaticBlob:
    r = _rot(math.radians(angle_deg))
    cov = r @ np.diag([sx * sx, sy * sy]) @ r.T
    return StaticBlob((float(x), float(y)), tuple(map(tuple, cov)), intensity)


def _route_points(traj: Trajectory) -> np.ndarray:
    return np.array([[p.x, p.y] for p in traj.samples])


def islet_field(count: int, extent: float, route: np.ndarray, clearance: float, seed: int,
                sigma_range: tuple[float, float] = (40.0, 130.0)) -> list[StaticBlob]:
    """Random small islands kept at least ``clearance`` meters off the route."""
    rng = np.random.default_rng([seed, 3])
    blobs = []
    while len(blobs) < count:
        x, y = rng.uniform(-extent, extent, size=2)
        if np.hypot(route[:, 0] - x, route[:, 1] - y).min() < clearance:
            continue
        sx, sy = np.sort(rng.uniform(*sigma_range, size=2))[::-1]
        blobs.append(_blob(x, y, sx, sy, rng.uniform(0, 180)))
    return blobs


def _single_island() -> tuple[Scene, Trajectory, FrameConfig]:
    traj = loop_trajectory((0.0, 0.0), (2200.0, 1500.0), frames_per_pass=100, passes=2,
                           reverse_alternate=True, lateral_offset=20.0, along_jitter=5.0, seed=11)
    blobs = [_blob(300, 150, 450, 260, 30)]
    blobs += islet_field(120, 5500.0, _route_points(traj), 400.0, seed=11)
    scene = Scene(static_blobs=blobs, bounds=(-6000.0, -6000.0, 6000.0, 6000.0))
    return scene, traj, FrameConfig.small()


def _anchorage_loop() -> tuple[Scene, Trajectory, FrameConfig]:
    radii = (2200.0, 1800.0)
    traj = loop_trajectory((0.0, 0.0), radii, frames_per_pass=100, passes=3,
                           lateral_offset=20.0, along_jitter=5.0, seed=23)
    blobs = [_blob(2400, 300, 200, 120, 20)]
    blobs += islet_field(25, 5500.0, _route_points(traj), 400.0, seed=23)
    # the route passes through every zone
    zones = [
        Anchorage((radii[0] * math.cos(t), radii[1] * math.sin(t)), 550.0, 6, 300.0)
        for t in (0.6, 2.6, 4.4)
    ]
    scene = Scene(static_blobs=blobs, anchorages=zones, bounds=(-6000.0, -6000.0, 6000.0, 6000.0))
    return scene, traj, FrameConfig.small()


PRESETS = {
    "single-island": _single_island,
    "anchorage-loop": _anchorage_loop,
}


def preset(name: str) -> tuple[Scene, Trajectory, FrameConfig]:
    try:
        return PRESETS[name]()
    except KeyError:
        raise SceneError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_scene(path) -> tuple[Scene, Optional[FrameConfig]]:
    """Scene JSON; an optional ``"frame"`` object overrides frame geometry."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneError(f"{path}: scene must be a JSON object")
    frame = data.get("frame")
    try:
        config = FrameConfig(**frame) if frame else None
    except TypeError as exc:
        raise SceneError(f"{path}: bad frame settings: {exc}") from exc
    return Scene.from_dict(data), config


def save_scene(path, scene: Scene, config: Optional[FrameConfig] = None) -> Path:
    data = scene.to_dict()
    if config is not None:
        data["frame"] = asdict(config)
    path = Path(path)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


def load_trajectory(path) -> Trajectory:
    try:
        return Trajectory.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON: {exc}") from exc


def save_trajectory(path, trajectory: Trajectory) -> Path:
    path = Path(path)
    path.write_text(json.dumps(trajectory.to_dict(), indent=2) + "\n")
    return path


def render_ellipse_frame(ellipses: Sequence, size: int, intensity: int = 200) -> np.ndarray:
    """Filled ellipses as a ``uint8`` intensity image (test scenes)."""
    return np.where(rasterize(ellipses, size, size, filled=True), intensity, 0).astype(np.uint8)
