"""
Landmark <-> heatmap conversion.

Ground-truth heatmaps are binary disks: a Gaussian centered at the
landmark, thresholded at half its in-image peak. Predicted heatmaps are
decoded back to coordinates via the centroid of above-threshold pixels.

Coordinates are (x, y) with origin top-left, x rightward (columns),
y downward (rows). Heatmap arrays are indexed [row, col].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np


@dataclass
class LandmarkSet:
    """N named 2D points for one image, in that image's pixel coordinates."""

    points: np.ndarray  # (N, 2) float64, columns (x, y)
    image_size: Tuple[int, int]  # (width, height)
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 1:
            raise ValueError("landmark set must contain at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def in_bounds(self) -> np.ndarray:
        w, h = self.image_size
        x, y = self.points[:, 0], self.points[:, 1]
        return (x >= 0) & (x < w) & (y >= 0) & (y < h)


@dataclass
class HeatmapStack:
    """Per-landmark heatmaps aligned to the working resolution."""

    maps: np.ndarray  # (N, H, W)
    encoding: str  # "binary_gaussian" | "predicted_logits"
    sigma: float = 5.0
    in_bounds: Optional[np.ndarray] = None  # (N,) bool, encoder-set

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be (N, H, W), got {self.maps.shape}")
        if self.encoding not in ("binary_gaussian", "predicted_logits"):
            raise ValueError(f"unknown encoding {self.encoding!r}")


def encode_heatmaps(
    landmarks: LandmarkSet, grid: Tuple[int, int], sigma: float = 5.0
) -> HeatmapStack:
    """Binary Gaussian heatmaps on an (H, W) grid.

    A pixel is on iff exp(-r^2 / (2 sigma^2)) exceeds half the Gaussian's
    peak (1 at the landmark itself), i.e. the half-maximum disk of radius
    sigma * sqrt(2 ln 2) around the real-valued landmark (no snapping to
    the grid, so the disk stays centered for sub-pixel coordinates).
    Out-of-bounds landmarks yield an all-zero channel and a cleared
    in_bounds flag. Disks are truncated at image borders.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = grid
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    n = len(landmarks)
    maps = np.zeros((n, h, w), dtype=np.float32)
    flags = np.zeros(n, dtype=bool)
    for i, (x, y) in enumerate(landmarks.points):
        if not (0 <= x < w and 0 <= y < h):
            continue
        flags[i] = True
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma ** 2))
        maps[i] = (g > 0.5).astype(np.float32)
    return HeatmapStack(maps=maps, encoding="binary_gaussian", sigma=sigma, in_bounds=flags)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_centroid(stack: HeatmapStack) -> LandmarkSet:
    """Centroid of above-threshold pixels, per channel, in grid coordinates.

    Logits are mapped through a logistic and thresholded at 0.5
    probability; binary maps are used as-is. When no pixel crosses the
    threshold the location of the channel maximum is returned instead, so
    a prediction always exists.
    """
    n, h, w = stack.maps.shape
    points = np.zeros((n, 2), dtype=np.float64)
    for i in range(n):
        channel = np.asarray(stack.maps[i], dtype=np.float64)
        if np.isnan(channel).all():
            raise ValueError(f"channel {i} is all-NaN")
        if stack.encoding == "predicted_logits":
            probs = _sigmoid(channel)
        else:
            probs = channel
        rows, cols = np.nonzero(probs > 0.5)
        if len(rows) > 0:
            points[i] = (cols.mean(), rows.mean())
        else:
            r, c = np.unravel_index(np.nanargmax(probs), (h, w))
            points[i] = (c, r)
    return LandmarkSet(points=points, image_size=(w, h))


def rescale_landmarks(
    landmarks: LandmarkSet, from_size: Tuple[int, int], to_size: Tuple[int, int]
) -> LandmarkSet:
    """Scale coordinates independently per axis by to/from size ratios."""
    fw, fh = from_size
    tw, th = to_size
    if fw <= 0 or fh <= 0:
        raise ValueError(f"source size must be positive, got {from_size}")
    scaled = landmarks.points * np.array([tw / fw, th / fh])
    return LandmarkSet(points=scaled, image_size=(tw, th), names=landmarks.names)
