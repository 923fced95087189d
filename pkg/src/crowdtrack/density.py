"""Gaussian heatmaps, crowd density maps and sliding-window counts.

All grids are ``(rows, cols)`` arrays on the downsampled feature grid. Point
lists are ``(col, row)`` integer cell coordinates, matching
:func:`crowdtrack.model.center_to_grid`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .model import BBox, GeometryError, GridGeometry, center_to_grid

__all__ = [
    "AdaptiveSigmaConfig",
    "DensityGrid",
    "IndicatorGrid",
    "IntegralImage",
    "KernelSpec",
    "TrainingTensors",
    "adaptive_sigmas",
    "density_from_centers",
    "gaussian_kernel",
    "heatmap_from_boxes",
    "heatmap_sigma",
    "indicator_blur",
    "training_targets",
    "window_counts",
]


@dataclass(frozen=True)
class KernelSpec:
    sigma: float
    truncation_radius: Optional[int] = None
    normalized: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.truncation_radius is None:
            object.__setattr__(self, "truncation_radius", math.ceil(3 * self.sigma))
        elif self.truncation_radius < math.ceil(3 * self.sigma):
            raise ValueError("truncation_radius must be at least ceil(3 * sigma)")


@dataclass(frozen=True)
class AdaptiveSigmaConfig:
    """kNN-driven kernel width: ``sigma = clamp(gamma * mean_knn_dist, floor, cap)``."""

    k: int = 3
    gamma: float = 0.3
    sigma_floor: float = 1.0
    sigma_cap: float = 15.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 < self.sigma_floor <= self.sigma_cap:
            raise ValueError("need 0 < sigma_floor <= sigma_cap")


@dataclass
class DensityGrid:
    values: np.ndarray
    geom: GridGeometry

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.geom.shape:
            raise GeometryError(
                f"density shape {self.values.shape} does not match grid {self.geom.shape}"
            )
        if np.any(self.values < 0):
            raise ValueError("density values must be non-negative")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass
class IndicatorGrid:
    """Binary grid marking candidate object-center cells."""

    values: np.ndarray
    geom: GridGeometry

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.geom.shape:
            raise GeometryError(
                f"indicator shape {v.shape} does not match grid {self.geom.shape}"
            )
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("indicator entries must be 0 or 1")
        self.values = v.astype(np.uint8)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @classmethod
    def empty(cls, geom: GridGeometry) -> "IndicatorGrid":
        return cls(np.zeros(geom.shape, dtype=np.uint8), geom)

    @classmethod
    def from_cells(cls, cells, geom: GridGeometry) -> "IndicatorGrid":
        v = np.zeros(geom.shape, dtype=np.uint8)
        for c, r in cells:
            if not (0 <= c < geom.grid_w and 0 <= r < geom.grid_h):
                raise GeometryError(f"cell ({c}, {r}) outside grid {geom.shape}")
            v[r, c] = 1
        return cls(v, geom)

    @classmethod
    def from_boxes(cls, boxes: Sequence[BBox], geom: GridGeometry) -> "IndicatorGrid":
        return cls.from_cells([center_to_grid(b.center(), geom)[0] for b in boxes], geom)

    def cells(self) -> List[tuple]:
        """Set cells as ``(col, row)`` in row-major order."""
        rows, cols = np.nonzero(self.values)
        return [(int(c), int(r)) for r, c in zip(rows, cols)]

    @property
    def count(self) -> int:
        return int(self.values.sum())


class IntegralImage:
    """Summed-area table with a zero first row and column."""

    def __init__(self, grid):
        g = np.asarray(grid, dtype=np.float64)
        if g.ndim != 2:
            raise ValueError("integral image needs a 2-d grid")
        self.shape = g.shape
        self.table = np.zeros((g.shape[0] + 1, g.shape[1] + 1))
        np.cumsum(np.cumsum(g, axis=0), axis=1, out=self.table[1:, 1:])

    def rect_sum(self, r0: int, c0: int, r1: int, c1: int) -> float:
        """Sum over rows ``[r0, r1)`` and cols ``[c0, c1)``, clipped to the grid."""
        h, w = self.shape
        r0, r1 = min(max(r0, 0), h), min(max(r1, 0), h)
        c0, c1 = min(max(c0, 0), w), min(max(c1, 0), w)
        if r1 <= r0 or c1 <= c0:
            return 0.0
        t = self.table
        return float(t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0])

    def box_sums(self, r0, c0, r1, c1) -> np.ndarray:
        """Vectorized :meth:`rect_sum` over arrays of corners."""
        h, w = self.shape
        r0, r1 = np.clip(r0, 0, h), np.clip(r1, 0, h)
        c0, c1 = np.clip(c0, 0, w), np.clip(c1, 0, w)
        t = self.table
        out = t[r1, c1] - t[r0, c1] - t[r1, c0] + t[r0, c0]
        return np.where((r1 > r0) & (c1 > c0), out, 0.0)

    def window_sums(self, window: int) -> np.ndarray:
        """Sum over the ``window x window`` square centered on every cell (zero padding)."""
        h, w = self.shape
        half = window // 2
        # table extended so that indices past the border clamp to its edges
        t = np.zeros((h + 1 + 2 * half, w + 1 + 2 * half))
        t[half: half + h + 1, half: half + w + 1] = self.table
        t[half + h + 1:, half: half + w + 1] = self.table[-1]
        t[:, half + w + 1:] = t[:, half + w: half + w + 1]
        return (
            t[window: window + h, window: window + w]
            - t[:h, window: window + w]
            - t[window: window + h, :w]
            + t[:h, :w]
        )


def _check_window(window: int) -> int:
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    return int(window)


def window_counts(grid, window: int) -> np.ndarray:
    """Count inside the odd ``window`` centered on every cell; one value per cell."""
    window = _check_window(window)
    g = np.asarray(grid, dtype=np.float64)
    if window == 1:
        return g.copy()
    return IntegralImage(g).window_sums(window)


def _gauss_1d(sigma: float, radius: int) -> np.ndarray:
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(k * k) / (2.0 * sigma * sigma))


def gaussian_kernel(spec: KernelSpec) -> np.ndarray:
    """Discrete 2-d Gaussian of side ``2 * radius + 1``.

    Normalized kernels sum to one; unnormalized ones peak at exactly one.
    """
    g = _gauss_1d(spec.sigma, spec.truncation_radius)
    k = np.outer(g, g)
    if spec.normalized:
        k /= k.sum()
    return k


def heatmap_sigma(box: BBox, geom: GridGeometry) -> float:
    """Heatmap spread for a box: a tenth of its mean grid size, at least one cell."""
    return max(1.0, (box.h / geom.r + box.w / geom.r) / 2 * 0.1)


def heatmap_from_boxes(
    boxes: Sequence[BBox],
    geom: GridGeometry,
    num_classes: int = 1,
    class_ids: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Center heatmap of shape ``(grid_h, grid_w, num_classes)``.

    Each box contributes a peak-one Gaussian at its center cell; overlapping
    Gaussians combine by elementwise maximum so values stay in ``[0, 1]``.
    """
    hm = np.zeros((geom.grid_h, geom.grid_w, num_classes))
    if class_ids is None:
        class_ids = [0] * len(boxes)
    if len(class_ids) != len(boxes):
        raise ValueError("class_ids must match boxes in length")
    xs = np.arange(geom.grid_w, dtype=np.float64)
    ys = np.arange(geom.grid_h, dtype=np.float64)
    for box, cls in zip(boxes, class_ids):
        if not 0 <= cls < num_classes:
            raise ValueError(f"class id {cls} outside [0, {num_classes})")
        (cx, cy), _ = center_to_grid(box.center(), geom)
        s2 = 2.0 * heatmap_sigma(box, geom) ** 2
        g = np.outer(np.exp(-((ys - cy) ** 2) / s2), np.exp(-((xs - cx) ** 2) / s2))
        np.maximum(hm[:, :, cls], g, out=hm[:, :, cls])
    return hm


def adaptive_sigmas(centers, cfg: AdaptiveSigmaConfig = AdaptiveSigmaConfig()) -> np.ndarray:
    """Per-center kernel widths from the mean distance to the ``k`` nearest neighbours."""
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        raise ValueError("adaptive_sigmas needs at least one center")
    if n == 1:
        return np.array([min(max(cfg.sigma_cap / 2, cfg.sigma_floor), cfg.sigma_cap)])
    k = min(cfg.k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    # the first column is the zero distance to the point itself
    mean_d = dist[:, 1:].mean(axis=1)
    return np.clip(cfg.gamma * mean_d, cfg.sigma_floor, cfg.sigma_cap)


def _as_cells(centers) -> np.ndarray:
    pts = np.asarray(centers).reshape(-1, 2)
    cells = pts.astype(np.int64)
    if not np.array_equal(cells, pts):
        raise ValueError("density centers must be integer grid cells")
    return cells


def _kernel_profiles(pos: np.ndarray, sigmas: np.ndarray, n: int) -> np.ndarray:
    """Row ``i``: normalized 1-d kernel of ``sigmas[i]`` centered at ``pos[i]`` on ``0..n-1``."""
    rad = np.ceil(3 * sigmas)
    big = int(rad.max())
    k = np.arange(-big, big + 1)
    g = np.exp(-(k * k)[None, :] / (2.0 * sigmas[:, None] ** 2)) * (np.abs(k)[None, :] <= rad[:, None])
    # normalize over the full truncated support, including any part off the grid
    g /= g.sum(axis=1, keepdims=True)
    out = np.zeros((len(pos), n + 2 * big))
    rows = np.arange(len(pos))[:, None]
    out[rows, pos.astype(np.int64)[:, None] + big + k[None, :]] = g
    return out[:, big: big + n]


def _accumulate_kernels(out: np.ndarray, cells: np.ndarray, sigmas: np.ndarray, weights=None):
    """Add unit-mass kernels (scaled by ``weights``) into ``out`` in place.

    Kernels are separable, so the sum over centers is one matrix product of
    row and column profiles.
    """
    if len(cells) == 0:
        return out
    h, w = out.shape
    cells = np.asarray(cells)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    gy = _kernel_profiles(cells[:, 1].astype(np.float64), sigmas, h)
    gx = _kernel_profiles(cells[:, 0].astype(np.float64), sigmas, w)
    if weights is not None:
        gy = gy * np.asarray(weights, dtype=np.float64)[:, None]
    out += gy.T @ gx
    return out


def density_from_centers(centers, sigmas, geom: GridGeometry) -> DensityGrid:
    """Sum of unit-mass Gaussian kernels; mass falling off the grid is dropped."""
    cells = _as_cells(centers)
    sig = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if len(sig) != len(cells):
        raise ValueError("one sigma per center is required")
    if np.any(sig <= 0):
        raise ValueError("sigmas must be positive")
    outside = (cells[:, 0] < 0) | (cells[:, 0] >= geom.grid_w) | (cells[:, 1] < 0) | (cells[:, 1] >= geom.grid_h)
    if outside.any():
        cx, cy = cells[np.argmax(outside)]
        raise GeometryError(f"center ({cx}, {cy}) outside grid {geom.shape}")
    out = _accumulate_kernels(np.zeros(geom.shape), cells, sig)
    return DensityGrid(out, geom)


def blur_cells(cells, geom: GridGeometry, cfg: AdaptiveSigmaConfig = AdaptiveSigmaConfig()) -> DensityGrid:
    """Adaptive-sigma density of a list of cells (duplicates allowed)."""
    cells = _as_cells(cells)
    if len(cells) == 0:
        return DensityGrid(np.zeros(geom.shape), geom)
    return density_from_centers(cells, adaptive_sigmas(cells, cfg), geom)


def indicator_blur(u: IndicatorGrid, cfg: AdaptiveSigmaConfig = AdaptiveSigmaConfig()) -> DensityGrid:
    return blur_cells(u.cells(), u.geom, cfg)


@dataclass
class TrainingTensors:
    """Supervision targets for one image.

    ``scale`` holds ``(h, w)`` in pixels and ``offset`` the sub-cell center
    offset, both only at annotated cells (``mask`` marks them).
    """

    heatmap: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    mask: np.ndarray
    density: DensityGrid
    indicator: IndicatorGrid
    identity: np.ndarray
    cells: List[tuple] = field(default_factory=list)


def training_targets(
    boxes: Sequence[BBox],
    identities: Sequence[int],
    num_identities: int,
    geom: GridGeometry,
    num_classes: int = 1,
    class_ids: Optional[Sequence[int]] = None,
    sigma_cfg: AdaptiveSigmaConfig = AdaptiveSigmaConfig(),
) -> TrainingTensors:
    if len(identities) != len(boxes):
        raise ValueError("one identity per box is required")
    hm = heatmap_from_boxes(boxes, geom, num_classes, class_ids)
    scale = np.zeros(geom.shape + (2,))
    offset = np.zeros(geom.shape + (2,))
    mask = np.zeros(geom.shape, dtype=bool)
    cells = []
    for box in boxes:
        (cx, cy), (ox, oy) = center_to_grid(box.center(), geom)
        if mask[cy, cx]:
            raise ValueError(f"two objects share grid cell ({cx}, {cy})")
        mask[cy, cx] = True
        scale[cy, cx] = (box.h, box.w)
        offset[cy, cx] = (ox, oy)
        cells.append((cx, cy))
    onehot = np.zeros((len(boxes), num_identities))
    for i, ident in enumerate(identities):
        if not 0 <= ident < num_identities:
            raise ValueError(f"identity {ident} outside [0, {num_identities})")
        onehot[i, ident] = 1.0
    return TrainingTensors(
        heatmap=hm,
        scale=scale,
        offset=offset,
        mask=mask,
        density=blur_cells(cells, geom, sigma_cfg),
        indicator=IndicatorGrid.from_cells(cells, geom),
        identity=onehot,
        cells=cells,
    )
