"""Keypoint-driven ROI geometry, oriented sampling and the ROI-bias perturbation.

Points are (x, y) in pixel units with x along columns, y growing downward,
and pixel centers at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

LUMA = (0.299, 0.587, 0.114)
BOX_SCALE = 1.25
CENTER_OFFSET = 0.85

Point = Tuple[float, float]


@dataclass(frozen=True)
class Keypoints:
    """Four finger-gap joints, annotated left to right as A, B, C, D."""

    a: Point
    b: Point
    c: Point
    d: Point
    mirrored: bool = False

    def __post_init__(self):
        for name in "abcd":
            p = tuple(float(v) for v in getattr(self, name))
            if len(p) != 2 or not np.all(np.isfinite(p)):
                raise ValueError(f"keypoint {name.upper()} must be a finite 2-D point")
            object.__setattr__(self, name, p)

    @classmethod
    def from_list(cls, pts: Sequence[Sequence[float]], mirrored: bool = False) -> "Keypoints":
        if len(pts) != 4:
            raise ValueError(f"need four keypoints, got {len(pts)}")
        return cls(*(tuple(p) for p in pts), mirrored=mirrored)

    def to_list(self):
        return [list(self.a), list(self.b), list(self.c), list(self.d)]

    def array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def check_inside(self, shape: Tuple[int, int]) -> None:
        h, w = shape[:2]
        pts = self.array()
        if np.any(pts < -0.5) or np.any(pts[:, 0] > w - 0.5) or np.any(pts[:, 1] > h - 0.5):
            raise ValueError(f"keypoints fall outside a {h}x{w} image")


@dataclass(frozen=True)
class RoiBox:
    center: np.ndarray  # O2
    side: float
    x_axis: np.ndarray
    y_axis: np.ndarray

    def corners(self) -> np.ndarray:
        h = self.side / 2
        return np.array([self.center + sx * h * self.x_axis + sy * h * self.y_axis
                         for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))])


def locate_roi(kp: Keypoints) -> RoiBox:
    """Square box of side 1.25 l centered 0.85 l below the midpoint of the gap midpoints.

    The x axis runs from K1 (midpoint of AB) to K2 (midpoint of CD); the y
    axis is x rotated by +90 degrees in image coordinates, flipped for
    mirrored annotations.
    """
    a, b, c, d = (np.asarray(p, dtype=np.float64) for p in (kp.a, kp.b, kp.c, kp.d))
    k1, k2 = (a + b) / 2, (c + d) / 2
    span = k2 - k1
    length = float(np.hypot(*span))
    if length == 0:
        raise ValueError("degenerate keypoints: K1 and K2 coincide")
    x_axis = span / length
    y_axis = np.array([-x_axis[1], x_axis[0]])
    if kp.mirrored:
        y_axis = -y_axis
    o1 = (k1 + k2) / 2
    return RoiBox(o1 + CENTER_OFFSET * length * y_axis, BOX_SCALE * length, x_axis, y_axis)


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] in (3, 4):
        return img[..., :3] @ np.array(LUMA)
    raise ValueError(f"unsupported image shape {img.shape}")


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; a constant image becomes all zeros."""
    img = np.asarray(img, dtype=np.float64)
    centered = img - img.mean()
    std = centered.std()
    return centered / std if std > 0 else centered


def sample_box(image: np.ndarray, box: RoiBox, out_size: int) -> np.ndarray:
    """Bilinear samples of the oriented square on an out_size grid of cell centers, zero outside."""
    img = to_gray(image)
    h, w = img.shape
    corners = box.corners()
    if (corners[:, 0].max() < -0.5 or corners[:, 0].min() > w - 0.5
            or corners[:, 1].max() < -0.5 or corners[:, 1].min() > h - 0.5):
        raise ValueError("ROI box lies entirely outside the image")
    t = (np.arange(out_size) + 0.5) * (box.side / out_size) - box.side / 2
    v, u = np.meshgrid(t, t, indexing="ij")
    px = box.center[0] + u * box.x_axis[0] + v * box.y_axis[0]
    py = box.center[1] + u * box.x_axis[1] + v * box.y_axis[1]
    return ndimage.map_coordinates(img, [py, px], order=1, mode="constant", cval=0.0)


def extract_roi(image: np.ndarray, box: RoiBox, out_size: int = 128, normalize: bool = True) -> np.ndarray:
    roi = sample_box(image, box, out_size)
    return normalize_image(roi) if normalize else roi


def resize_bilinear(img: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    """Half-pixel-aligned bilinear resize with edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = out_shape
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


@dataclass(frozen=True)
class BiasSpec:
    r: int
    seed: int = 0

    def interval(self) -> Tuple[int, int]:
        return max(self.r - 2, 0), max(self.r + 2, 0)

    def draw(self) -> Tuple[int, int]:
        lo, hi = self.interval()
        tx, ty = np.random.default_rng(self.seed).integers(lo, hi + 1, size=2)
        return int(tx), int(ty)


def bias_transform(roi: np.ndarray, spec: BiasSpec,
                   translation: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Shift the ROI window by (tx, ty) pixels and resize the remaining crop back.

    Returns the perturbed image and the translation used. A translation can
    be forced, which bypasses the seeded draw.
    """
    roi = np.asarray(roi, dtype=np.float64)
    h, w = roi.shape
    tx, ty = translation if translation is not None else spec.draw()
    if tx < 0 or ty < 0:
        raise ValueError("translations must be non-negative")
    if tx >= w or ty >= h:
        raise ValueError(f"translation ({tx}, {ty}) is not smaller than the {h}x{w} ROI")
    if tx == 0 and ty == 0:
        return roi.copy(), (0, 0)
    return resize_bilinear(roi[ty:, tx:], (h, w)), (tx, ty)


def bias_displacement(position: float, t: int, size: int) -> float:
    """Where a feature at pixel ``position`` lands after a crop at ``t`` and resize back to ``size``."""
    return (position + 0.5 - t) * size / (size - t) - 0.5
