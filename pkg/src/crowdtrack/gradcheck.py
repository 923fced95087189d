"""Finite-difference verification of the analytic loss gradients."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import losses
from .density import AdaptiveSigmaConfig, adaptive_sigmas

STEP = 1e-5


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of a scalar function at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric) -> float:
    """Sup-norm error scaled by the larger sup-norm of the two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _grid_shape(rng, lo=4, hi=16):
    return (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))


def _trial_focal(rng):
    shape = _grid_shape(rng)
    gt = rng.uniform(0, 0.99, size=shape)
    npos = int(rng.integers(1, 4))
    idx = rng.choice(gt.size, size=npos, replace=False)
    gt.reshape(-1)[idx] = 1.0
    pred = rng.uniform(0.05, 0.95, size=shape)
    _, g = losses.focal_center_loss(pred, gt)
    return relative_error(g, numeric_grad(lambda p: losses.focal_center_loss(p, gt)[0], pred))


def _trial_scale(rng):
    n = int(rng.integers(1, 11))
    gt_s, gt_o = rng.uniform(5, 50, (n, 2)), rng.uniform(0, 1, (n, 2))
    # keep every residual at least 1e-2 away from the kink at zero
    ds = rng.uniform(0.01, 3, (n, 2)) * rng.choice([-1, 1], (n, 2))
    do = rng.uniform(0.01, 0.5, (n, 2)) * rng.choice([-1, 1], (n, 2))
    ps, po = gt_s + ds, gt_o + do
    _, (gs, go) = losses.scale_offset_loss(ps, gt_s, po, gt_o)
    ns = numeric_grad(lambda x: losses.scale_offset_loss(x, gt_s, po, gt_o)[0], ps)
    no = numeric_grad(lambda x: losses.scale_offset_loss(ps, gt_s, x, gt_o)[0], po)
    return max(relative_error(gs, ns), relative_error(go, no))


def _make_counting_trial(dissimilarity: bool):
    def trial(rng):
        shape = _grid_shape(rng, lo=11)
        params = losses.CountLossParams(
            mu=float(rng.choice([1.0, 10.0, 1000.0])), ssim_as_dissimilarity=dissimilarity
        )
        gt = rng.uniform(0, 0.05, shape)
        pred = params.mu * gt + rng.normal(0, 0.1 * params.mu * 0.05, shape)
        _, g = losses.counting_loss(pred, gt, params)
        return relative_error(g, numeric_grad(lambda p: losses.counting_loss_value(p, gt, params), pred))
    return trial


def _trial_ssim(rng):
    shape = _grid_shape(rng, lo=11)
    a, b = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
    _, g = losses.ssim(a, b, return_grad=True)
    return relative_error(g, numeric_grad(lambda x: losses.ssim(x, b), a))


def _trial_det_count(rng):
    shape = _grid_shape(rng)
    n = int(rng.integers(1, 11))
    cells = np.stack([rng.integers(0, shape[1], n), rng.integers(0, shape[0], n)], axis=1)
    sig = adaptive_sigmas(cells, AdaptiveSigmaConfig(sigma_cap=4.0))
    weights = rng.uniform(0, 1, n)
    dhat = rng.uniform(0, 0.2, shape)
    _, g = losses.det_count_loss_weighted(cells, weights, sig, dhat)
    return relative_error(
        g, numeric_grad(lambda w: losses.det_count_loss_weighted(cells, w, sig, dhat)[0], weights)
    )


def _trial_window_count(rng):
    shape = _grid_shape(rng)
    window = int(rng.choice([1, 3, 5, 9, 19]))
    dhat = rng.uniform(0, 0.3, shape)
    u = (rng.uniform(size=shape) < 0.1).astype(np.float64)
    _, g = losses.window_count_loss(dhat, u, window)
    return relative_error(g, numeric_grad(lambda d: losses.window_count_loss(d, u, window)[0], dhat))


def _trial_reid(rng):
    n, n_ids = int(rng.integers(1, 11)), int(rng.integers(2, 20))
    batch = losses.ReidBatch(rng.normal(0, 2, (n, n_ids)), rng.integers(0, n_ids, n))
    _, g = losses.reid_loss(batch)
    labels = batch.labels
    return relative_error(
        g, numeric_grad(lambda z: losses.reid_loss(losses.ReidBatch(z, labels))[0], batch.logits)
    )


def _trial_total(rng):
    comps = rng.uniform(0.1, 10, 3)
    w = rng.uniform(-3, 2, 3)
    _, g = losses.total_loss(*comps, losses.UncertaintyWeights(*w))
    return relative_error(
        g, numeric_grad(lambda x: losses.total_loss(*comps, losses.UncertaintyWeights(*x))[0], w)
    )


CHECKS: Dict[str, Callable] = {
    "focal": _trial_focal,
    "scale_offset": _trial_scale,
    "ssim": _trial_ssim,
    "counting": _make_counting_trial(False),
    "counting_dissimilarity": _make_counting_trial(True),
    "det_count": _trial_det_count,
    "window_count": _trial_window_count,
    "reid": _trial_reid,
    "total": _trial_total,
}


@dataclass
class GradcheckResult:
    name: str
    trials: int
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        # strict so that a zero tolerance always reports failure
        return self.max_rel_error < self.tol


def run_gradcheck(names: List[str], trials: int = 100, tol: float = 1e-4, seed: int = 0) -> List[GradcheckResult]:
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown loss: {', '.join(unknown)}")
    results = []
    for name in names:
        rng = np.random.Generator(np.random.Philox(seed))
        t0 = time.perf_counter()
        worst = max(CHECKS[name](rng) for _ in range(trials))
        results.append(GradcheckResult(name, trials, worst, tol, time.perf_counter() - t0))
    return results
