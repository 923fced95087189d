"""Seeded synthetic crowd scenes.

Agents move at constant speed with small heading noise and bounce off the
image borders. Each frame yields ground-truth boxes, detections corrupted by
an occlusion-driven miss model, box jitter and uniform false positives, a
ground-truth density map and per-detection identity embeddings.

All randomness comes from ``numpy.random.Philox`` (a counter-based 64-bit
generator) seeded with ``SimConfig.seed``. Box coordinates and confidences are
rounded to two decimals and embeddings/densities to float32 precision, so a
scene written to disk and read back is identical to the in-memory one.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import io as fio
from .density import AdaptiveSigmaConfig, DensityGrid, adaptive_sigmas, density_from_centers
from .model import EMBEDDING_DIM, BBox, Detection, GridGeometry, center_to_grid, iou_matrix


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    width: int = 640
    height: int = 384
    r: int = 4
    n_agents: int = 8
    n_frames: int = 100
    agent_width: Tuple[float, float] = (20.0, 32.0)
    aspect: Tuple[float, float] = (2.2, 2.8)
    speed: Tuple[float, float] = (0.5, 2.0)
    turn_std: float = 0.05
    occlusion_miss_base: float = 0.0
    occlusion_miss_gain: float = 0.0
    fp_rate: float = 0.0
    box_jitter_std: float = 0.0
    embedding_noise_std: float = 0.0
    sigma: AdaptiveSigmaConfig = field(default_factory=AdaptiveSigmaConfig)

    def __post_init__(self):
        for name in ("occlusion_miss_base", "occlusion_miss_gain"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_agents < 0 or self.n_frames < 1:
            raise ValueError("need n_agents >= 0 and n_frames >= 1")
        if self.fp_rate < 0 or self.box_jitter_std < 0 or self.embedding_noise_std < 0:
            raise ValueError("fp_rate, box_jitter_std and embedding_noise_std must be >= 0")
        if self.agent_width[1] * self.aspect[1] >= self.height or self.agent_width[1] >= self.width:
            raise ValueError("agents must fit inside the image")
        GridGeometry(self.width, self.height, self.r)

    @property
    def geom(self) -> GridGeometry:
        return GridGeometry(self.width, self.height, self.r)


PRESETS: Dict[str, SimConfig] = {
    "sparse": SimConfig(
        seed=7, n_agents=8, n_frames=100,
        occlusion_miss_base=0.02, occlusion_miss_gain=0.5, fp_rate=0.3,
        box_jitter_std=1.0, embedding_noise_std=0.03,
    ),
    "crowded": SimConfig(
        seed=11, n_agents=40, n_frames=150,
        occlusion_miss_base=0.05, occlusion_miss_gain=1.0, fp_rate=1.0,
        box_jitter_std=1.0, embedding_noise_std=0.03,
    ),
    "mot20like": SimConfig(
        seed=20, width=1088, height=608, n_agents=100, n_frames=60,
        agent_width=(24.0, 40.0),
        occlusion_miss_base=0.05, occlusion_miss_gain=1.0, fp_rate=2.0,
        box_jitter_std=1.0, embedding_noise_std=0.03,
    ),
}


def preset(name: str, **overrides) -> SimConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def noiseless(cfg: SimConfig) -> SimConfig:
    """Same scene layout with every detection corruption switched off."""
    return dataclasses.replace(
        cfg, occlusion_miss_base=0.0, occlusion_miss_gain=0.0, fp_rate=0.0,
        box_jitter_std=0.0, embedding_noise_std=0.0,
    )


@dataclass
class Scene:
    config: SimConfig
    gt: List[List[Tuple[int, BBox]]]
    detections: List[List[Detection]]
    det_sources: List[List[int]]
    densities: List[DensityGrid]
    basis: np.ndarray

    @property
    def geom(self) -> GridGeometry:
        return self.config.geom

    def gt_records(self) -> List[fio.MotRecord]:
        return [
            fio.MotRecord(f, ident, *box.to_tuple(), 1.0)
            for f, frame in enumerate(self.gt, 1)
            for ident, box in frame
        ]

    def det_records(self) -> List[fio.MotRecord]:
        return [
            fio.MotRecord(f, -1, *d.bbox.to_tuple(), d.confidence)
            for f, frame in enumerate(self.detections, 1)
            for d in frame
        ]

    def embedding_rows(self):
        return [
            (f, i, d.embedding)
            for f, frame in enumerate(self.detections, 1)
            for i, d in enumerate(frame)
            if d.embedding is not None
        ]

    def gt_counts(self) -> List[int]:
        return [len(frame) for frame in self.gt]

    def miss_rate(self) -> float:
        total = sum(len(f) for f in self.gt)
        found = sum(sum(1 for s in src if s >= 0) for src in self.det_sources)
        return 1.0 - found / total if total else 0.0

    def fp_per_frame(self) -> float:
        return sum(sum(1 for s in src if s < 0) for src in self.det_sources) / len(self.det_sources)

    def write(self, out_dir) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "gt": out / "gt.txt",
            "det": out / "det.txt",
            "density": out / "density.cmdg",
            "embeddings": out / "embeddings.cmeb",
        }
        fio.write_mot(paths["gt"], self.gt_records())
        fio.write_mot(paths["det"], self.det_records())
        fio.write_density(paths["density"], self.densities, self.geom.r)
        fio.write_embeddings(paths["embeddings"], self.embedding_rows())
        return paths


def _unit_rows(rng, n: int, dim: int = EMBEDDING_DIM) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _identity_basis(rng, n: int) -> np.ndarray:
    """Orthonormal identity vectors when ``n`` fits the dimension, random unit rows otherwise."""
    if n == 0:
        return np.zeros((0, EMBEDDING_DIM))
    if n <= EMBEDDING_DIM:
        q, _ = np.linalg.qr(rng.normal(size=(EMBEDDING_DIM, n)))
        return q.T.copy()
    return _unit_rows(rng, n)


def _f32_unit(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    return v.astype(np.float32).astype(np.float64)


def _r2(v):
    return np.round(np.asarray(v, dtype=np.float64), 2)


def _clip_box(x, y, w, h, cfg: SimConfig) -> BBox:
    x = min(max(x, 0.0), cfg.width - w)
    y = min(max(y, 0.0), cfg.height - h)
    return BBox(float(_r2(x)), float(_r2(y)), float(w), float(h))


def generate(cfg: SimConfig) -> Scene:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    n, geom = cfg.n_agents, cfg.geom
    w = _r2(rng.uniform(*cfg.agent_width, size=n))
    h = _r2(w * rng.uniform(*cfg.aspect, size=n))
    cx = rng.uniform(w / 2, cfg.width - w / 2)
    cy = rng.uniform(h / 2, cfg.height - h / 2)
    heading = rng.uniform(0, 2 * np.pi, size=n)
    speed = rng.uniform(*cfg.speed, size=n)
    basis = _identity_basis(rng, n)

    gt, dets, sources, densities = [], [], [], []
    for _ in range(cfg.n_frames):
        boxes = [_clip_box(cx[i] - w[i] / 2, cy[i] - h[i] / 2, w[i], h[i], cfg) for i in range(n)]
        gt.append(list(zip(range(1, n + 1), boxes)))

        cells = [center_to_grid(b.center(), geom)[0] for b in boxes]
        if cells:
            dens = density_from_centers(cells, adaptive_sigmas(cells, cfg.sigma), geom).values
        else:
            dens = np.zeros(geom.shape)
        densities.append(DensityGrid(dens.astype(np.float32).astype(np.float64), geom))

        # fixed draw order per frame keeps the stream layout independent of outcomes
        u_miss = rng.uniform(size=n)
        jitter = rng.normal(0.0, 1.0, size=(n, 4)) * cfg.box_jitter_std
        conf = _r2(rng.uniform(0.6, 1.0, size=n))
        emb_noise = rng.normal(0.0, 1.0, size=(n, EMBEDDING_DIM)) * cfg.embedding_noise_std
        n_fp = int(rng.poisson(cfg.fp_rate))
        fp_w = _r2(rng.uniform(*cfg.agent_width, size=n_fp))
        fp_h = _r2(fp_w * rng.uniform(*cfg.aspect, size=n_fp))
        fp_x = rng.uniform(0, cfg.width - fp_w)
        fp_y = rng.uniform(0, cfg.height - fp_h)
        fp_conf = _r2(rng.uniform(0.1, 0.5, size=n_fp))
        fp_emb = _unit_rows(rng, n_fp)

        arr = np.array([b.to_tuple() for b in boxes]).reshape(-1, 4)
        ious = iou_matrix(arr, arr)
        bottom = arr[:, 1] + arr[:, 3]
        nearer = bottom[None, :] > bottom[:, None]
        max_iou = np.where(nearer, ious, 0.0).max(axis=1, initial=0.0)
        p_miss = np.minimum(1.0, cfg.occlusion_miss_base + cfg.occlusion_miss_gain * max_iou)

        frame_dets, frame_src = [], []
        for i in range(n):
            if u_miss[i] < p_miss[i]:
                continue
            bx, by, bw, bh = arr[i] + jitter[i]
            bw, bh = _r2(max(bw, 1.0)), _r2(max(bh, 1.0))
            box = _clip_box(bx, by, bw, bh, cfg)
            emb = _f32_unit(basis[i] + emb_noise[i])
            frame_dets.append(Detection(box, float(conf[i]), 0, emb))
            frame_src.append(i + 1)
        for j in range(n_fp):
            box = _clip_box(_r2(fp_x[j]), _r2(fp_y[j]), fp_w[j], fp_h[j], cfg)
            frame_dets.append(Detection(box, float(fp_conf[j]), 0, _f32_unit(fp_emb[j])))
            frame_src.append(-1)
        dets.append(frame_dets)
        sources.append(frame_src)

        heading = heading + rng.normal(0.0, cfg.turn_std, size=n)
        cx = cx + speed * np.cos(heading)
        cy = cy + speed * np.sin(heading)
        lo_x, hi_x = w / 2, cfg.width - w / 2
        lo_y, hi_y = h / 2, cfg.height - h / 2
        # mirror positions and headings at the borders
        left, right = cx < lo_x, cx > hi_x
        cx = np.where(left, 2 * lo_x - cx, np.where(right, 2 * hi_x - cx, cx))
        heading = np.where(left | right, np.pi - heading, heading)
        top, bot = cy < lo_y, cy > hi_y
        cy = np.where(top, 2 * lo_y - cy, np.where(bot, 2 * hi_y - cy, cy))
        heading = np.where(top | bot, -heading, heading)

    return Scene(cfg, gt, dets, sources, densities, basis)


def load_scene_files(det_path, density_path=None, embeddings_path=None, n_frames=None):
    """Read detections (with optional embeddings) and densities written by :meth:`Scene.write`."""
    emb = fio.read_embeddings(embeddings_path, EMBEDDING_DIM) if embeddings_path else None
    densities = fio.read_density(density_path) if density_path else None
    if densities is not None:
        n_frames = max(n_frames or 0, len(densities))
    frames = fio.detections_by_frame(fio.read_mot(det_path), n_frames, emb)
    return frames, densities
