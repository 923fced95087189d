"""Online multi-object tracking.

A constant-velocity Kalman filter over ``(cx, cy, a, h)`` (center, aspect
ratio ``w/h``, height) and their velocities, a two-stage association
(appearance blended with motion, then IoU) and a track lifecycle.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import EMBEDDING_DIM, BBox, Detection, iou_matrix

CHI2_95_4DOF = 9.4877


@dataclass(frozen=True)
class KalmanNoise:
    """Height-scaled noise model; all standard deviations are fractions of box height."""

    std_weight_position: float = 1.0 / 20
    std_weight_velocity: float = 1.0 / 160
    std_weight_measurement: float = 1.0 / 20
    aspect_position_std: float = 1e-2
    aspect_velocity_std: float = 1e-5
    aspect_measurement_std: float = 1e-1


DEFAULT_NOISE = KalmanNoise()

_F = np.eye(8)
_F[:4, 4:] = np.eye(4)


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def to_bbox(self) -> BBox:
        cx, cy, a, h = self.mean[:4]
        # a long coast can drive the extrapolated size through zero
        h = max(h, 1e-3)
        w = max(a * h, 1e-3)
        return BBox(float(cx - w / 2), float(cy - h / 2), float(w), float(h))


def box_to_measurement(box: BBox) -> np.ndarray:
    cx, cy = box.center()
    return np.array([cx, cy, box.w / box.h, box.h])


def measurements(dets: Sequence[Detection]) -> np.ndarray:
    """Stacked ``(cx, cy, a, h)`` rows for a list of detections."""
    b = np.array([d.bbox.to_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
    return np.column_stack([b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2, b[:, 2] / b[:, 3], b[:, 3]])


def _measurement(det) -> np.ndarray:
    box = det.bbox if isinstance(det, Detection) else det
    return box_to_measurement(box)


def kf_initiate(det, noise: KalmanNoise = DEFAULT_NOISE) -> KalmanState:
    z = _measurement(det)
    mean = np.r_[z, np.zeros(4)]
    h = z[3]
    sp, sv = noise.std_weight_position, noise.std_weight_velocity
    std = np.array([
        2 * sp * h, 2 * sp * h, noise.aspect_position_std, 2 * sp * h,
        10 * sv * h, 10 * sv * h, noise.aspect_velocity_std, 10 * sv * h,
    ])
    return KalmanState(mean, np.diag(std ** 2))


def _process_noise(h, noise: KalmanNoise) -> np.ndarray:
    """Diagonal of the process noise for heights ``h`` (scalar or array)."""
    h = np.asarray(h, dtype=np.float64)
    sp, sv = noise.std_weight_position, noise.std_weight_velocity
    one = np.ones_like(h)
    std = np.stack([
        sp * h, sp * h, noise.aspect_position_std * one, sp * h,
        sv * h, sv * h, noise.aspect_velocity_std * one, sv * h,
    ], axis=-1)
    return std ** 2


def _measurement_noise(h, noise: KalmanNoise) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    sm = noise.std_weight_measurement
    std = np.stack([sm * h, sm * h, noise.aspect_measurement_std * np.ones_like(h), sm * h], axis=-1)
    return std ** 2


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + np.swapaxes(p, -1, -2))


def kf_predict(state: KalmanState, noise: KalmanNoise = DEFAULT_NOISE) -> KalmanState:
    mean = _F @ state.mean
    q = np.diag(_process_noise(state.mean[3], noise))
    cov = _symmetrize(_F @ state.covariance @ _F.T + q)
    return KalmanState(mean, cov)


def kf_project(state: KalmanState, noise: KalmanNoise = DEFAULT_NOISE) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted measurement mean and innovation covariance."""
    r = np.diag(_measurement_noise(state.mean[3], noise))
    return state.mean[:4].copy(), state.covariance[:4, :4] + r


def kf_update(state: KalmanState, det, noise: KalmanNoise = DEFAULT_NOISE) -> KalmanState:
    z = _measurement(det)
    proj_mean, s = kf_project(state, noise)
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is singular") from exc
    pht = state.covariance[:, :4]
    # K = P H^T S^-1, solved through the Cholesky factor
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
    mean = state.mean + gain @ (z - proj_mean)
    cov = _symmetrize(state.covariance - gain @ s @ gain.T)
    return KalmanState(mean, cov)


def _kf_update_batch(means: np.ndarray, covs: np.ndarray, z: np.ndarray, noise: KalmanNoise, scale=None):
    """Vectorized :func:`kf_update` over stacked states ``(n, 8)``, ``(n, 8, 8)``.

    ``scale`` optionally multiplies each measurement-noise variance, ``(n, 4)``.
    """
    s = covs[:, :4, :4].copy()
    idx = np.arange(4)
    r = _measurement_noise(means[:, 3], noise)
    if scale is not None:
        r = r * scale
    s[:, idx, idx] += r
    pht = covs[:, :, :4]
    # S is symmetric, so K^T = S^-1 (P H^T)^T
    gain = np.swapaxes(np.linalg.solve(s, np.swapaxes(pht, 1, 2)), 1, 2)
    innov = z - means[:, :4]
    new_means = means + (gain @ innov[:, :, None])[:, :, 0]
    new_covs = _symmetrize(covs - gain @ s @ np.swapaxes(gain, 1, 2))
    return new_means, new_covs


def mahalanobis_sq(mean: np.ndarray, cov: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distance of measurements ``z`` (``(m, 4)`` or ``(4,)``)."""
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is singular") from exc
    d = np.atleast_2d(z) - mean
    y = np.linalg.solve(chol, d.T)
    out = np.sum(y * y, axis=0)
    return out if np.ndim(z) == 2 else out[0]


def mahalanobis(state: KalmanState, det, noise: KalmanNoise = DEFAULT_NOISE) -> float:
    mean, s = kf_project(state, noise)
    return float(mahalanobis_sq(mean, s, _measurement(det)))


def hungarian(cost, infeasible=None):
    """Minimum-cost assignment restricted to feasible pairs.

    Among all matchings that use only feasible pairs, the one with the most
    pairs is chosen, and among those the cheapest. Returns
    ``(pairs, unmatched_rows, unmatched_cols)``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    n, m = cost.shape
    feas = np.ones_like(cost, dtype=bool) if infeasible is None else ~np.asarray(infeasible, dtype=bool)
    if cost.size and not np.all(np.isfinite(cost[feas])):
        raise ValueError("feasible costs must be finite")
    if n == 0 or m == 0 or not feas.any():
        return [], list(range(n)), list(range(m))
    lo, hi = cost[feas].min(), cost[feas].max()
    big = min(n, m) * (hi - lo) + 1.0
    work = np.where(feas, cost - lo, big)
    rows, cols = linear_sum_assignment(work)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if feas[r, c]]
    mr = {r for r, _ in pairs}
    mc = {c for _, c in pairs}
    return pairs, [r for r in range(n) if r not in mr], [c for c in range(m) if c not in mc]


class TrackStatus(enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass
class Track:
    id: int
    state: KalmanState
    embedding: Optional[np.ndarray] = None
    hits: int = 1
    age: int = 1
    time_since_update: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE

    @property
    def is_confirmed(self) -> bool:
        return self.status is TrackStatus.CONFIRMED

    def to_bbox(self) -> BBox:
        return self.state.to_bbox()


@dataclass(frozen=True)
class AssocConfig:
    lam: float = 0.98
    tau: float = 0.5
    max_age: int = 30
    gating_threshold: float = CHI2_95_4DOF
    embedding_momentum: float = 0.9
    n_init: int = 3
    max_appearance_cost: float = 0.6
    init_confidence: float = 0.6
    weak_size_noise_scale: float = 100.0
    noise: KalmanNoise = field(default=DEFAULT_NOISE)

    def __post_init__(self):
        for name in ("lam", "tau", "embedding_momentum", "init_confidence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_age < 0 or self.n_init < 1:
            raise ValueError("max_age must be >= 0 and n_init >= 1")
        if not self.weak_size_noise_scale >= 1.0:
            raise ValueError("weak_size_noise_scale must be >= 1")
        if not self.gating_threshold > 0:
            raise ValueError("gating_threshold must be positive")


def _mahalanobis_arrays(means: np.ndarray, covs: np.ndarray, z: np.ndarray, noise: KalmanNoise) -> np.ndarray:
    """Squared Mahalanobis distances of ``z`` to stacked states, ``(n_tracks, n_dets)``."""
    s = covs[:, :4, :4].copy()
    idx = np.arange(4)
    s[:, idx, idx] += _measurement_noise(means[:, 3], noise)
    s_inv = np.linalg.inv(s)
    d = z[None, :, :] - means[:, None, :4]
    return np.sum((d @ s_inv) * d, axis=2)


def _cost_arrays(means, covs, t_emb, t_has, z, d_emb, d_has, cfg: AssocConfig):
    n, m = len(means), len(z)
    maha = _mahalanobis_arrays(means, covs, z, cfg.noise)
    cos = np.ones((n, m))
    if t_has.any() and d_has.any():
        cos[np.ix_(t_has, d_has)] = np.clip(1.0 - t_emb[t_has] @ d_emb[d_has].T, 0.0, 2.0)
    motion = np.minimum(maha / cfg.gating_threshold, 1.0)
    cost = cfg.lam * cos + (1.0 - cfg.lam) * motion
    gated = (maha > cfg.gating_threshold) | ~t_has[:, None] | ~d_has[None, :]
    gated |= cos > cfg.max_appearance_cost
    return cost, gated


def _embedding_matrix(items) -> Tuple[np.ndarray, np.ndarray]:
    has = np.array([e is not None for e in items], dtype=bool)
    emb = np.zeros((len(items), EMBEDDING_DIM))
    if has.any():
        emb[has] = np.stack([e for e in items if e is not None])
    return emb, has


def build_cost_matrix(tracks: Sequence[Track], dets: Sequence[Detection], cfg: AssocConfig = AssocConfig()):
    """Blend of appearance and motion distance with a chi-square motion gate.

    Returns ``(cost, gated)``; gated pairs are infeasible.
    """
    n, m = len(tracks), len(dets)
    if n == 0 or m == 0:
        return np.zeros((n, m)), np.zeros((n, m), dtype=bool)
    means = np.stack([t.state.mean for t in tracks])
    covs = np.stack([t.state.covariance for t in tracks])
    t_emb, t_has = _embedding_matrix([t.embedding for t in tracks])
    d_emb, d_has = _embedding_matrix([d.embedding for d in dets])
    return _cost_arrays(means, covs, t_emb, t_has, measurements(dets), d_emb, d_has, cfg)


def _boxes_from_means(means: np.ndarray) -> np.ndarray:
    """``(x, y, w, h)`` rows; sizes are floored as in :meth:`KalmanState.to_bbox`."""
    h = np.maximum(means[:, 3], 1e-3)
    w = np.maximum(means[:, 2] * h, 1e-3)
    return np.column_stack([means[:, 0] - w / 2, means[:, 1] - h / 2, w, h])


@dataclass(frozen=True)
class TrackOutput:
    frame: int
    id: int
    bbox: BBox


class Tracker:
    """Stateful online tracker for one sequence; call :meth:`step` once per frame.

    Track state lives in stacked arrays (one row per live track, ordered by
    id); :attr:`tracks` returns :class:`Track` snapshots.
    """

    def __init__(self, cfg: AssocConfig = AssocConfig()):
        self.cfg = cfg
        self.frame = 0
        self._next_id = 1
        self._ids = np.zeros(0, dtype=np.int64)
        self._hits = np.zeros(0, dtype=np.int64)
        self._age = np.zeros(0, dtype=np.int64)
        self._tsu = np.zeros(0, dtype=np.int64)
        self._confirmed = np.zeros(0, dtype=bool)
        self._mean = np.zeros((0, 8))
        self._cov = np.zeros((0, 8, 8))
        self._emb = np.zeros((0, EMBEDDING_DIM))
        self._has_emb = np.zeros(0, dtype=bool)

    @property
    def tracks(self) -> List[Track]:
        return [
            Track(
                id=int(self._ids[i]),
                state=KalmanState(self._mean[i].copy(), self._cov[i].copy()),
                embedding=self._emb[i].copy() if self._has_emb[i] else None,
                hits=int(self._hits[i]),
                age=int(self._age[i]),
                time_since_update=int(self._tsu[i]),
                status=TrackStatus.CONFIRMED if self._confirmed[i] else TrackStatus.TENTATIVE,
            )
            for i in range(len(self._ids))
        ]

    def _predict_all(self):
        if not len(self._ids):
            return
        q = _process_noise(self._mean[:, 3], self.cfg.noise)
        self._mean = self._mean @ _F.T
        covs = _F @ self._cov @ _F.T
        idx = np.arange(8)
        covs[:, idx, idx] += q
        self._cov = _symmetrize(covs)
        self._age += 1
        self._tsu += 1

    def _match_stage1(self, z, d_emb, d_has):
        cand = np.flatnonzero(self._confirmed)
        if not len(cand) or not len(z):
            return [], list(cand), list(range(len(z)))
        cost, gated = _cost_arrays(
            self._mean[cand], self._cov[cand], self._emb[cand], self._has_emb[cand],
            z, d_emb, d_has, self.cfg,
        )
        pairs, ur, uc = hungarian(cost, gated)
        return [(int(cand[r]), c) for r, c in pairs], [int(cand[r]) for r in ur], uc

    def _match_stage2(self, track_idx, det_idx, det_boxes):
        if not track_idx or not det_idx:
            return [], track_idx, det_idx
        tb = _boxes_from_means(self._mean[track_idx])
        ious = iou_matrix(tb, det_boxes[det_idx])
        pairs, ur, uc = hungarian(1.0 - ious, ious < self.cfg.tau)
        return (
            [(track_idx[r], det_idx[c]) for r, c in pairs],
            [track_idx[r] for r in ur],
            [det_idx[c] for c in uc],
        )

    def _update(self, matches, dets, z, d_emb, d_has):
        if not matches:
            return
        ti = np.array([t for t, _ in matches])
        di = np.array([d for _, d in matches])
        weak = np.array([dets[d].confidence < self.cfg.init_confidence for d in di])
        scale = np.ones((len(ti), 4))
        # weak detections carry no regressed size, so trust their sizes less
        scale[weak, 2:] = self.cfg.weak_size_noise_scale
        self._mean[ti], self._cov[ti] = _kf_update_batch(self._mean[ti], self._cov[ti], z[di], self.cfg.noise, scale)

        # exponential moving average of appearance, renormalized
        m = self.cfg.embedding_momentum
        blend = d_has[di] & self._has_emb[ti]
        if blend.any():
            e = m * self._emb[ti[blend]] + (1 - m) * d_emb[di[blend]]
            self._emb[ti[blend]] = e / np.linalg.norm(e, axis=1, keepdims=True)
        fresh = d_has[di] & ~self._has_emb[ti]
        self._emb[ti[fresh]] = d_emb[di[fresh]]
        self._has_emb[ti[fresh]] = True

        self._hits[ti] += 1
        self._tsu[ti] = 0
        self._confirmed[ti] |= self._hits[ti] >= self.cfg.n_init

    def step(self, dets: Sequence[Detection], frame: Optional[int] = None) -> List[TrackOutput]:
        cfg = self.cfg
        self.frame = self.frame + 1 if frame is None else int(frame)
        first = self._next_id == 1 and not len(self._ids)
        dets = list(dets)
        z = measurements(dets)
        det_boxes = np.array([d.bbox.to_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
        d_emb, d_has = _embedding_matrix([d.embedding for d in dets])
        self._predict_all()

        matches, rem_tracks, rem_dets = self._match_stage1(z, d_emb, d_has)
        # confirmed tracks unmatched by appearance join the tentative ones for IoU matching
        stage2 = [int(i) for i in np.flatnonzero(~self._confirmed)] + rem_tracks
        m2, unmatched_tracks, unmatched_dets = self._match_stage2(stage2, rem_dets, det_boxes)
        matches += m2
        self._update(matches, dets, z, d_emb, d_has)

        keep = np.ones(len(self._ids), dtype=bool)
        for ti in unmatched_tracks:
            if not self._confirmed[ti] or self._tsu[ti] > cfg.max_age:
                keep[ti] = False

        # weak detections may extend tracks but never start one
        born = [d for d in sorted(unmatched_dets) if dets[d].confidence >= cfg.init_confidence]
        if born:
            states = [kf_initiate(dets[d], cfg.noise) for d in born]
            n_new = len(born)
            self._ids = np.r_[self._ids, np.arange(self._next_id, self._next_id + n_new)]
            self._next_id += n_new
            self._hits = np.r_[self._hits, np.ones(n_new, dtype=np.int64)]
            self._age = np.r_[self._age, np.ones(n_new, dtype=np.int64)]
            self._tsu = np.r_[self._tsu, np.zeros(n_new, dtype=np.int64)]
            # the opening frame of a sequence has no history to confirm against
            self._confirmed = np.r_[self._confirmed, np.full(n_new, first or cfg.n_init <= 1)]
            self._mean = np.concatenate([self._mean, np.stack([s.mean for s in states])])
            self._cov = np.concatenate([self._cov, np.stack([s.covariance for s in states])])
            self._emb = np.concatenate([self._emb, d_emb[born]])
            self._has_emb = np.r_[self._has_emb, d_has[born]]
            keep = np.r_[keep, np.ones(n_new, dtype=bool)]

        if not keep.all():
            for name in ("_ids", "_hits", "_age", "_tsu", "_confirmed", "_mean", "_cov", "_emb", "_has_emb"):
                setattr(self, name, getattr(self, name)[keep])

        out_idx = np.flatnonzero(self._confirmed & (self._tsu == 0))
        boxes = _boxes_from_means(self._mean[out_idx])
        return [
            TrackOutput(self.frame, int(self._ids[i]), BBox(*map(float, b)))
            for i, b in zip(out_idx, boxes)
        ]


def track_sequence(frames: Sequence[Sequence[Detection]], cfg: AssocConfig = AssocConfig()) -> List[TrackOutput]:
    tracker = Tracker(cfg)
    out: List[TrackOutput] = []
    for dets in frames:
        out.extend(tracker.step(dets))
    return out
