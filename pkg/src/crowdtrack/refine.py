"""Density-guided detection refinement for a single frame.

Two greedy passes enforce count consistency between detections and a crowd
density map. The rejection pass drops low-confidence detections whose removal
lowers the window-count loss; the recovery pass adds detections where the
density holds unexplained mass. Every accepted move strictly lowers the
window-count loss, so refinement never increases it.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .density import AdaptiveSigmaConfig, IntegralImage, _check_window, _gauss_1d, blur_cells, window_counts
from .model import BBox, Detection, GeometryError, GridGeometry, center_to_grid


@dataclass(frozen=True)
class RefineConfig:
    window: int = 19
    add_mass_threshold: float = 0.5
    remove_gain_threshold: float = 0.0
    max_added_per_frame: int = 50
    min_peak_separation: float = 3.0
    default_box: Tuple[float, float] = (32.0, 80.0)
    recovered_confidence: float = 0.5
    exempt_confidence: float = 0.6
    sigma: AdaptiveSigmaConfig = field(default_factory=AdaptiveSigmaConfig)

    def __post_init__(self):
        _check_window(self.window)
        if not 0 < self.add_mass_threshold <= 1:
            raise ValueError("add_mass_threshold must lie in (0, 1]")
        if self.remove_gain_threshold < 0:
            raise ValueError("remove_gain_threshold must be >= 0")
        if not 0 < self.recovered_confidence < 1:
            raise ValueError("recovered_confidence must lie in (0, 1)")
        if self.max_added_per_frame < 0:
            raise ValueError("max_added_per_frame must be >= 0")


@dataclass
class RefineReport:
    added: List[Detection]
    removed: List[Detection]
    initial_count_gap: float
    final_count_gap: float

    def to_json(self, frame: int) -> dict:
        return {
            "frame": frame,
            "added": [list(d.bbox.to_tuple()) for d in self.added],
            "removed": [list(d.bbox.to_tuple()) for d in self.removed],
            "initial_count_gap": self.initial_count_gap,
            "final_count_gap": self.final_count_gap,
        }


def _density_array(dhat, geom: GridGeometry = None) -> Tuple[np.ndarray, GridGeometry]:
    values = np.asarray(dhat, dtype=np.float64)
    geom = getattr(dhat, "geom", geom)
    if geom is None:
        raise ValueError("a DensityGrid (or explicit geometry) is required")
    if values.shape != geom.shape:
        raise GeometryError(f"density shape {values.shape} does not match grid {geom.shape}")
    return values, geom


def detection_cells(dets: Sequence[Detection], geom: GridGeometry) -> List[Tuple[int, int]]:
    return [center_to_grid(d.bbox.center(), geom)[0] for d in dets]


def count_grid(cells, geom: GridGeometry) -> np.ndarray:
    """Number of detections whose center falls in each cell."""
    c = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    flat = np.bincount(c[:, 1] * geom.grid_w + c[:, 0], minlength=geom.grid_h * geom.grid_w)
    return flat.reshape(geom.shape).astype(np.float64)


def residual_density(dets: Sequence[Detection], dhat, cfg_sigma: AdaptiveSigmaConfig = AdaptiveSigmaConfig()) -> np.ndarray:
    """Density minus the blurred detection centers (signed).

    Positive mass is density no detection explains; negative mass marks
    detections the density does not support.
    """
    values, geom = _density_array(dhat)
    blurred = blur_cells(detection_cells(dets, geom), geom, cfg_sigma).values
    return values - blurred


def _sigma_for(point, others: np.ndarray, cfg: AdaptiveSigmaConfig) -> float:
    if len(others) == 0:
        return min(max(cfg.sigma_cap / 2, cfg.sigma_floor), cfg.sigma_cap)
    d2 = (others[:, 0] - point[0]) ** 2 + (others[:, 1] - point[1]) ** 2
    k = min(cfg.k, len(d2))
    nearest = np.partition(d2, k - 1)[:k] if k < len(d2) else d2
    return float(np.clip(cfg.gamma * np.sqrt(nearest).mean(), cfg.sigma_floor, cfg.sigma_cap))


def _subtract_kernel(res: np.ndarray, cell, sigma: float):
    h, w = res.shape
    cx, cy = cell
    rad = math.ceil(3 * sigma)
    g = _gauss_1d(sigma, rad)
    g /= g.sum()
    r0, r1 = max(cy - rad, 0), min(cy + rad + 1, h)
    c0, c1 = max(cx - rad, 0), min(cx + rad + 1, w)
    res[r0:r1, c0:c1] -= np.outer(g[r0 - cy + rad: r1 - cy + rad], g[c0 - cx + rad: c1 - cx + rad])


def _recovered_box(cell, sizes: np.ndarray, cells: np.ndarray, geom: GridGeometry, cfg: RefineConfig) -> BBox:
    cx, cy = geom.cell_center(cell)
    near = (cells[:, 0] - cell[0]) ** 2 + (cells[:, 1] - cell[1]) ** 2 <= (2 * cfg.window) ** 2
    if near.any():
        w, h = sizes[near].mean(axis=0)
    else:
        w, h = cfg.default_box
    return BBox.from_center(cx, cy, float(w), float(h))


class _WindowGap:
    """Window counts of ``density - detections`` with O(window^2) local updates.

    Placing (``sign=+1``) or dropping (``sign=-1``) one count at a cell moves
    every covering window's gap by one, so the change of ``K * loss`` is
    ``area - 2 * sign * (sum of the gaps of the covering windows)``.
    """

    def __init__(self, values: np.ndarray, cells, geom: GridGeometry, window: int):
        self.half = window // 2
        self.gap = window_counts(values - count_grid(cells, geom), window)
        self.k = values.size

    def _span(self, cell):
        h, w = self.gap.shape
        cx, cy = cell
        return max(cy - self.half, 0), min(cy + self.half + 1, h), max(cx - self.half, 0), min(cx + self.half + 1, w)

    def delta(self, cell, sign: int) -> float:
        r0, r1, c0, c1 = self._span(cell)
        area = (r1 - r0) * (c1 - c0)
        return area - 2.0 * sign * float(self.gap[r0:r1, c0:c1].sum())

    def apply(self, cell, sign: int):
        r0, r1, c0, c1 = self._span(cell)
        self.gap[r0:r1, c0:c1] -= sign

    def loss(self) -> float:
        return float(np.sum(self.gap * self.gap) / self.k)


def _local_max(a: np.ndarray, half: int) -> np.ndarray:
    """Maximum over the ``(2 * half + 1)``-square around each cell, clipped at the border."""
    out = a.copy()
    for axis in (0, 1):
        src = out.copy()
        for o in range(1, half + 1):
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis], hi[axis] = slice(o, None), slice(None, -o)
            np.maximum(out[tuple(lo)], src[tuple(hi)], out=out[tuple(lo)])
            np.maximum(out[tuple(hi)], src[tuple(lo)], out=out[tuple(hi)])
    return out


def _peaks(res: np.ndarray, sep: int, region=None) -> List[Tuple[int, int]]:
    """Positive cells that are the maximum of their ``(2 * sep + 1)``-square.

    ``region`` limits the search to a ``(r0, r1, c0, c1)`` block.
    """
    h, w = res.shape
    r0, r1, c0, c1 = region if region is not None else (0, h, 0, w)
    # widen the crop so the inner block sees its full neighbourhood
    R0, R1, C0, C1 = max(r0 - sep, 0), min(r1 + sep, h), max(c0 - sep, 0), min(c1 + sep, w)
    crop = res[R0:R1, C0:C1]
    inner = np.s_[r0 - R0: r1 - R0, c0 - C0: c1 - C0]
    sub = crop[inner]
    pr, pc = np.nonzero((sub > 0) & (sub >= _local_max(crop, sep)[inner]))
    return list(zip((pr + r0).tolist(), (pc + c0).tolist()))


def _changed_peaks(res: np.ndarray, sep: int, blocks) -> List[Tuple[int, int]]:
    """Peaks within ``sep`` of any changed block, in row-major order."""
    if not blocks:
        return []
    h, w = res.shape
    grown = [(max(r0 - sep, 0), min(r1 + sep, h), max(c0 - sep, 0), min(c1 + sep, w)) for r0, r1, c0, c1 in blocks]
    r0, r1 = min(b[0] for b in grown), max(b[1] for b in grown)
    c0, c1 = min(b[2] for b in grown), max(b[3] for b in grown)
    mask = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for a0, a1, b0, b1 in grown:
        mask[a0 - r0:a1 - r0, b0 - c0:b1 - c0] = True
    return [(r, c) for r, c in _peaks(res, sep, (r0, r1, c0, c1)) if mask[r - r0, c - c0]]


def _recover(dets, cells, values, geom, cfg: RefineConfig, wg: _WindowGap) -> List[Detection]:
    res = values - blur_cells(cells, geom, cfg.sigma).values
    pos = np.maximum(res, 0.0)
    half = cfg.window // 2
    h, w = res.shape
    sep = max(cfg.min_peak_separation, 1.0)
    isep = int(sep)

    def local_score(r, c):
        return float(pos[max(r - half, 0): r + half + 1, max(c - half, 0): c + half + 1].sum())

    peaks = _peaks(res, isep)
    pr = np.array([p[0] for p in peaks], dtype=np.int64)
    pc = np.array([p[1] for p in peaks], dtype=np.int64)
    score = IntegralImage(pos).box_sums(pr - half, pc - half, pr + half + 1, pc + half + 1)
    heap = [(-v, r, c) for v, (r, c) in zip(score.tolist(), peaks)]

    placed = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    sizes = np.array([(d.bbox.w, d.bbox.h) for d in dets], dtype=np.float64).reshape(-1, 2)
    added_cells: List[Tuple[int, int]] = []
    added: List[Detection] = []
    while heap:
        heapq.heapify(heap)
        changed = []
        while heap and len(added) < cfg.max_added_per_frame:
            neg, r, c = heapq.heappop(heap)
            cur = local_score(r, c)
            # the residual only shrinks, so stored scores are upper bounds
            if cur < -neg - 1e-9:
                heapq.heappush(heap, (-cur, r, c))
                continue
            if cur < cfg.add_mass_threshold:
                break
            if any((c - ac) ** 2 + (r - ar) ** 2 < sep * sep for ac, ar in added_cells):
                continue
            cell = (c, r)
            if not wg.delta(cell, +1) < 0:
                continue
            box = _recovered_box(cell, sizes, placed[: len(dets)], geom, cfg)
            added.append(Detection(box, confidence=cfg.recovered_confidence))
            added_cells.append(cell)
            wg.apply(cell, +1)
            sigma = _sigma_for(cell, placed, cfg.sigma)
            _subtract_kernel(res, cell, sigma)
            rad = math.ceil(3 * sigma)
            block = (max(r - rad, 0), min(r + rad + 1, h), max(c - rad, 0), min(c + rad + 1, w))
            pos[block[0]:block[1], block[2]:block[3]] = np.maximum(res[block[0]:block[1], block[2]:block[3]], 0.0)
            changed.append(block)
            placed = np.vstack([placed, [cell]])
        if len(added) >= cfg.max_added_per_frame:
            break
        # Every candidate left over is below threshold or permanently rejected.
        # Overlapping blobs can hide behind one maximum, so look again for new
        # peaks, which can only appear where the residual just changed.
        heap = [(-local_score(r, c), r, c) for r, c in _changed_peaks(res, isep, changed)]
    return added


def _reject(dets, cells, cfg: RefineConfig, wg: _WindowGap) -> List[int]:
    active = [i for i, d in enumerate(dets) if d.confidence < cfg.exempt_confidence]
    removed: List[int] = []
    while active:
        # loss change from dropping one count at each candidate's cell
        deltas = [wg.delta(cells[i], -1) / wg.k for i in active]
        best = min(range(len(active)), key=lambda j: (deltas[j], cells[active[j]][1], cells[active[j]][0], active[j]))
        if not deltas[best] < -cfg.remove_gain_threshold:
            break
        i = active.pop(best)
        removed.append(i)
        wg.apply(cells[i], -1)
    return sorted(removed)


def recover_missed(dets: Sequence[Detection], dhat, cfg: RefineConfig = RefineConfig()) -> List[Detection]:
    """Greedily add detections where the density has unexplained mass.

    Candidates are local maxima of the residual, ranked by the positive
    residual mass inside the window around them (row-major order breaks
    ties). A candidate is added when that mass reaches ``add_mass_threshold``,
    it keeps ``min_peak_separation`` from earlier additions and the addition
    lowers the window-count loss. Each addition removes one unit kernel from
    the residual.
    """
    values, geom = _density_array(dhat)
    dets = list(dets)
    cells = detection_cells(dets, geom)
    wg = _WindowGap(values, cells, geom, cfg.window)
    return _recover(dets, cells, values, geom, cfg, wg)


def reject_false(dets: Sequence[Detection], dhat, cfg: RefineConfig = RefineConfig()) -> List[Detection]:
    """Greedily remove unconfident detections the density does not support.

    Detections at or above ``exempt_confidence`` are never removed.
    """
    values, geom = _density_array(dhat)
    dets = list(dets)
    cells = detection_cells(dets, geom)
    wg = _WindowGap(values, cells, geom, cfg.window)
    return [dets[i] for i in _reject(dets, cells, cfg, wg)]


def count_gap(dets: Sequence[Detection], dhat, window: int) -> float:
    """Mean squared window-count difference between density and detections."""
    values, geom = _density_array(dhat)
    gap = window_counts(values - count_grid(detection_cells(dets, geom), geom), window)
    return float(np.sum(gap * gap) / values.size)


def refine_frame(dets: Sequence[Detection], dhat, cfg: RefineConfig = RefineConfig()):
    """Reject then recover. Returns ``(refined_detections, RefineReport)``."""
    values, geom = _density_array(dhat)
    dets = list(dets)
    cells = detection_cells(dets, geom)
    wg = _WindowGap(values, cells, geom, cfg.window)
    initial = wg.loss()
    removed_idx = set(_reject(dets, cells, cfg, wg))
    keep = [i for i in range(len(dets)) if i not in removed_idx]
    kept = [dets[i] for i in keep]
    added = _recover(kept, [cells[i] for i in keep], values, geom, cfg, wg)
    refined = kept + added
    final = wg.loss()
    if final > initial + 1e-9 * max(1.0, initial):
        raise RuntimeError(f"refinement increased the count gap: {initial} -> {final}")
    removed = [d for i, d in enumerate(dets) if i in removed_idx]
    return refined, RefineReport(added, removed, initial, final)
