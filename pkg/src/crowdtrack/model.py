"""Core value types and geometry shared across the package.

Boxes follow the MOTChallenge convention (top-left corner plus size, in
input-image pixels). Grid coordinates are ``(col, row)`` on the feature grid
obtained by downsampling the image by an integer factor ``r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

EMBEDDING_DIM = 128
_UNIT_TOL = 1e-6


class GeometryError(ValueError):
    """A point, box or grid size is incompatible with the grid geometry."""


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box size must be positive, got w={self.w}, h={self.h}")

    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def to_tlbr(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    """One detected object. ``embedding`` is a unit vector when present."""

    bbox: BBox
    confidence: float = 1.0
    class_id: int = 0
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64)
            if emb.ndim != 1:
                raise ValueError("embedding must be a 1-d vector")
            norm = float(np.linalg.norm(emb))
            if abs(norm - 1.0) > _UNIT_TOL:
                raise ValueError(f"embedding must be unit-norm, got norm {norm:.8f}")
            emb.setflags(write=False)
            object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class GridGeometry:
    """Input image size and the integer downsampling factor to the feature grid."""

    in_w: int
    in_h: int
    r: int = 4

    def __post_init__(self):
        if self.r < 1 or int(self.r) != self.r:
            raise GeometryError(f"downsample factor must be a positive integer, got {self.r}")
        if self.in_w <= 0 or self.in_h <= 0:
            raise GeometryError(f"image size must be positive, got {self.in_w}x{self.in_h}")
        if self.in_w % self.r or self.in_h % self.r:
            raise GeometryError(
                f"image size {self.in_w}x{self.in_h} is not divisible by r={self.r}"
            )

    @property
    def grid_w(self) -> int:
        return self.in_w // self.r

    @property
    def grid_h(self) -> int:
        return self.in_h // self.r

    @property
    def shape(self) -> Tuple[int, int]:
        """Grid shape as ``(rows, cols)``."""
        return (self.grid_h, self.grid_w)

    @classmethod
    def from_grid(cls, grid_h: int, grid_w: int, r: int = 4) -> "GridGeometry":
        return cls(grid_w * r, grid_h * r, r)

    def cell_center(self, cell: Tuple[int, int]) -> Tuple[float, float]:
        """Pixel coordinates of the center of grid cell ``(col, row)``."""
        return ((cell[0] + 0.5) * self.r, (cell[1] + 0.5) * self.r)


def center_to_grid(p, geom: GridGeometry):
    """Map a pixel point to its grid cell and the sub-cell offset.

    Returns ``((col, row), (ox, oy))`` with offsets in ``[0, 1)`` such that
    ``(cell + offset) * r`` reproduces ``p``.
    """
    px, py = float(p[0]), float(p[1])
    if not (0 <= px < geom.in_w and 0 <= py < geom.in_h):
        raise GeometryError(
            f"point ({px}, {py}) outside image of size {geom.in_w}x{geom.in_h}"
        )
    sx, sy = px / geom.r, py / geom.r
    cx, cy = math.floor(sx), math.floor(sy)
    return (cx, cy), (sx - cx, sy - cy)


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` arrays of ``(x, y, w, h)`` boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def cosine_distance(e1, e2) -> float:
    """``1 - <e1, e2>`` for unit vectors; lies in ``[0, 2]``."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    for name, e in (("e1", e1), ("e2", e2)):
        n = float(np.linalg.norm(e))
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"{name} must be unit-norm, got norm {n:.8f}")
    return float(np.clip(1.0 - e1 @ e2, 0.0, 2.0))


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return v / n
