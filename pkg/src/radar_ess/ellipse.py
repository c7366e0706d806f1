"""Elliptical scan shaping: moment-based ellipse fits and outline rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_SAMPLES = 128


@dataclass(frozen=True)
class Ellipse:
    """Parametric ellipse in pixel coordinates.

    ``theta`` is the direction of the major axis, measured from the +x axis
    towards +y, in ``(-pi/2, pi/2]``.
    """

    xc: float
    yc: float
    a: float
    b: float
    theta: float

    def rotated(self, angle: float, center: tuple[float, float]) -> "Ellipse":
        """The same ellipse rotated by ``angle`` about ``center``."""
        x0, y0 = center
        c, s = math.cos(angle), math.sin(angle)
        dx, dy = self.xc - x0, self.yc - y0
        theta = _wrap_half_turn(self.theta + angle)
        return Ellipse(x0 + c * dx - s * dy, y0 + s * dx + c * dy, self.a, self.b, theta)


def _wrap_half_turn(theta: float) -> float:
    """Map an axis direction into ``(-pi/2, pi/2]``."""
    theta = math.fmod(theta, math.pi)
    if theta > math.pi / 2:
        theta -= math.pi
    elif theta <= -math.pi / 2:
        theta += math.pi
    return theta


def cluster_moments(points: np.ndarray) -> tuple[float, float, float, float, float]:
    """Centroid and population covariance ``(xc, yc, c11, c22, c12)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError("cluster must be a non-empty (N, 2) array of pixel coordinates")
    # local origin: exact for pixel coordinates, so the shape does not depend on position
    origin = pts[0]
    rel = pts - origin
    mx, my = rel.mean(axis=0)
    dx, dy = rel[:, 0] - mx, rel[:, 1] - my
    n = len(pts)
    return (float(origin[0] + mx), float(origin[1] + my),
            float(dx @ dx / n), float(dy @ dy / n), float(dx @ dy / n))


def fit_ellipse(points: np.ndarray) -> Ellipse:
    """Best-fit ellipse of a pixel cluster from its second moments.

    Axes are ``2 * sqrt(lambda)`` of the covariance eigenvalues.  The
    orientation uses ``atan2(2 c12, c11 - c22) / 2`` so that it follows the
    major axis even when ``c22 > c11``; the isotropic case gives 0.
    """
    xc, yc, c11, c22, c12 = cluster_moments(points)
    half_trace = 0.5 * (c11 + c22)
    root = 0.5 * math.sqrt((c11 - c22) ** 2 + 4.0 * c12 * c12)
    lam1 = half_trace + root
    lam2 = max(half_trace - root, 0.0)  # rounding can push a flat cluster below 0
    if c12 == 0.0 and c11 == c22:
        theta = 0.0
    else:
        theta = _wrap_half_turn(0.5 * math.atan2(2.0 * c12, c11 - c22))
    return Ellipse(xc, yc, 2.0 * math.sqrt(lam1), 2.0 * math.sqrt(lam2), theta)


def fit_clusters(clusters: Sequence[np.ndarray]) -> list[Ellipse]:
    return [fit_ellipse(c) for c in clusters]


def sample_count(ellipse: Ellipse, base: int = DEFAULT_SAMPLES) -> int:
    """Outline samples for one ellipse: ``base``, raised to ``ceil(2 pi a)``.

    A point ellipse (``a == 0``) has a single sample.
    """
    if ellipse.a == 0.0:
        return 1
    return max(base, math.ceil(2.0 * math.pi * ellipse.a))


def sample_outline(ellipse: Ellipse, n: int) -> np.ndarray:
    """``n`` outline points at uniform ``t`` in ``[0, 2 pi)``, shape ``(n, 2)``."""
    t = np.arange(n) * (2.0 * math.pi / n)
    ct, st = np.cos(t), np.sin(t)
    c, s = math.cos(ellipse.theta), math.sin(ellipse.theta)
    x = ellipse.xc + ellipse.a * ct * c - ellipse.b * st * s
    y = ellipse.yc + ellipse.a * ct * s + ellipse.b * st * c
    return np.column_stack([x, y])


def sample_outlines(ellipses: Sequence[Ellipse], samples_per_ellipse: int = DEFAULT_SAMPLES) -> np.ndarray:
    if samples_per_ellipse < 8:
        raise ValueError("samples_per_ellipse must be >= 8")
    if not ellipses:
        return np.empty((0, 2))
    return np.concatenate([sample_outline(e, sample_count(e, samples_per_ellipse)) for e in ellipses])


def _fill_mask(ellipse: Ellipse, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    r = ellipse.a + 0.5
    x0, x1 = max(int(math.floor(ellipse.xc - r)), 0), min(int(math.ceil(ellipse.xc + r)), width - 1)
    y0, y1 = max(int(math.floor(ellipse.yc - r)), 0), min(int(math.ceil(ellipse.yc + r)), height - 1)
    if x0 > x1 or y0 > y1:
        return mask
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    dx, dy = xs - ellipse.xc, ys - ellipse.yc
    c, s = math.cos(ellipse.theta), math.sin(ellipse.theta)
    u, v = dx * c + dy * s, -dx * s + dy * c
    # half-pixel margin keeps degenerate (b = 0) ellipses visible as segments
    a, b = ellipse.a + 0.5, ellipse.b + 0.5
    mask[y0:y1 + 1, x0:x1 + 1] = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def rasterize(
    ellipses: Sequence[Ellipse],
    width: int,
    height: int,
    samples_per_ellipse: int = DEFAULT_SAMPLES,
    filled: bool = False,
) -> np.ndarray:
    """Union of ellipse outlines (or interiors) as a ``(height, width)`` mask.

    Outline points are rounded to the nearest pixel; points off the grid
    are dropped.
    """
    if samples_per_ellipse < 8:
        raise ValueError("samples_per_ellipse must be >= 8")
    image = np.zeros((height, width), dtype=bool)
    if not ellipses:
        return image
    if filled:
        for e in ellipses:
            image |= _fill_mask(e, width, height)
        return image
    pts = np.rint(sample_outlines(ellipses, samples_per_ellipse)).astype(np.int64)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < width) & (pts[:, 1] >= 0) & (pts[:, 1] < height)
    pts = pts[inside]
    image[pts[:, 1], pts[:, 0]] = True
    return image
