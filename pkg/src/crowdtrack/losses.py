"""Training losses with analytic gradients.

Every differentiable loss returns ``(value, grad)`` where ``grad`` has the
shape of the variable being optimized. These are reference implementations
in numpy; :mod:`crowdtrack.gradcheck` verifies them against central finite
differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .density import (
    AdaptiveSigmaConfig,
    IndicatorGrid,
    _accumulate_kernels,
    _as_cells,
    _check_window,
    blur_cells,
    window_counts,
)

PRED_EPS = 1e-6


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0


@dataclass(frozen=True)
class CountLossParams:
    mu: float = 1000.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    ssim_as_dissimilarity: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd, got {self.ssim_window}")


@dataclass(frozen=True)
class UncertaintyWeights:
    w1: float = -2.0
    w2: float = -1.0
    w3: float = -1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3], dtype=np.float64)


@dataclass
class ReidBatch:
    """Identity logits for ``N`` objects and their labels over ``L`` identities.

    ``labels`` may be given as integer indices or as one-hot rows.
    """

    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        n, n_ids = self.logits.shape
        if n < 1 or n_ids < 2:
            raise ValueError("need at least one object and two identities")
        lab = np.asarray(self.labels)
        if lab.ndim == 2:
            if lab.shape != self.logits.shape or not np.all(lab.sum(axis=1) == 1) \
                    or not np.all((lab == 0) | (lab == 1)):
                raise ValueError("one-hot labels must have exactly one 1 per row")
            lab = lab.argmax(axis=1)
        lab = lab.astype(np.int64).reshape(-1)
        if len(lab) != n:
            raise ValueError("one label per object is required")
        if np.any(lab < 0) or np.any(lab >= n_ids):
            raise ValueError(f"label index outside [0, {n_ids})")
        self.labels = lab

    @property
    def onehot(self) -> np.ndarray:
        out = np.zeros_like(self.logits)
        out[np.arange(len(self.labels)), self.labels] = 1.0
        return out

    @classmethod
    def from_embedding_map(cls, emap, cells, classifier, labels) -> "ReidBatch":
        """Read embeddings at object-center cells of an ``(H, W, D)`` map and classify.

        ``classifier`` is an ``(L, D)`` weight matrix.
        """
        emap = np.asarray(emap, dtype=np.float64)
        feats = np.stack([emap[r, c] for c, r in cells])
        return cls(feats @ np.asarray(classifier, dtype=np.float64).T, labels)


def focal_center_loss(pred, gt, params: FocalParams = FocalParams()):
    """Penalty-reduced pixel-wise focal loss over a center heatmap."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    pos = gt == 1.0
    n = int(pos.sum())
    if n == 0:
        raise ValueError("focal loss needs at least one positive cell")
    a, b = params.alpha, params.beta
    p = np.clip(pred, PRED_EPS, 1.0 - PRED_EPS)
    inside = (pred >= PRED_EPS) & (pred <= 1.0 - PRED_EPS)
    logp, log1mp = np.log(p), np.log1p(-p)
    negw = (1.0 - gt) ** b
    pos_term = (1.0 - p) ** a * logp
    neg_term = negw * p ** a * log1mp
    loss = -(np.sum(pos_term[pos]) + np.sum(neg_term[~pos])) / n
    d_pos = -a * (1.0 - p) ** (a - 1) * logp + (1.0 - p) ** a / p
    d_neg = negw * (a * p ** (a - 1) * log1mp - p ** a / (1.0 - p))
    grad = -np.where(pos, d_pos, d_neg) / n
    grad[~inside] = 0.0
    return float(loss), grad


def scale_offset_loss(pred_s, gt_s, pred_o, gt_o):
    """L1 loss on per-object sizes and center offsets.

    Returns ``(loss, (grad_s, grad_o))``; the subgradient at zero is zero.
    """
    arrs = [np.asarray(x, dtype=np.float64).reshape(-1, 2) for x in (pred_s, gt_s, pred_o, gt_o)]
    if len({len(x) for x in arrs}) != 1:
        raise ValueError("scale and offset lists must have equal length")
    ds = arrs[0] - arrs[1]
    do = arrs[2] - arrs[3]
    loss = float(np.abs(ds).sum() + np.abs(do).sum())
    return loss, (np.sign(ds), np.sign(do))


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    k = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(k * k) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only fully-contained windows."""
    half = len(g) // 2
    y = correlate1d(x, g, axis=-2, mode="constant")
    y = correlate1d(y, g, axis=-1, mode="constant")
    return y[..., half: x.shape[-2] - half, half: x.shape[-1] - half]


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray, shape) -> np.ndarray:
    half = len(g) // 2
    full = np.zeros(y.shape[:-2] + tuple(shape))
    full[..., half: shape[0] - half, half: shape[1] - half] = y
    # adjoint of correlation is correlation with the reversed taps
    out = correlate1d(full, g[::-1], axis=-2, mode="constant")
    return correlate1d(out, g[::-1], axis=-1, mode="constant")


def _ssim_constants(b: np.ndarray, params: CountLossParams):
    lr = max(float(b.max() - b.min()), 1e-6)
    return (params.k1 * lr) ** 2, (params.k2 * lr) ** 2


def ssim(a, b, params: CountLossParams = CountLossParams(), return_grad: bool = False):
    """Mean structural similarity over all fully-contained Gaussian windows.

    The dynamic range used in the stabilizing constants is taken from ``b``
    (the reference), so the gradient with respect to ``a`` treats them as fixed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = params.ssim_window
    if a.ndim != 2 or min(a.shape) < n:
        raise ValueError(f"ssim needs 2-d grids of at least {n}x{n}, got {a.shape}")
    g = _gauss_window(n, params.ssim_sigma)
    c1, c2 = _ssim_constants(b, params)
    mu_a, mu_b, s_aa, s_bb, s_ab = _filter_valid(np.stack([a, b, a * a, b * b, a * b]), g)
    var_a = s_aa - mu_a ** 2
    var_b = s_bb - mu_b ** 2
    cov = s_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a ** 2 + mu_b ** 2 + c1
    b2 = var_a + var_b + c2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    m = smap.size
    d_mu = (2 * mu_b * a2 - 2 * mu_b * a1) / (b1 * b2) - smap * (2 * mu_a / b1 - 2 * mu_a / b2)
    d_saa = -smap / b2
    d_sab = 2 * a1 / (b1 * b2)
    adj = _filter_valid_adjoint(np.stack([d_mu, d_saa, d_sab]), g, a.shape)
    grad = (adj[0] + 2 * a * adj[1] + b * adj[2]) / m
    return value, grad


def _amplified_target(pred, gt, params):
    pred = np.asarray(pred, dtype=np.float64)
    target = params.mu * np.asarray(gt, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def counting_loss_value(pred, gt, params: CountLossParams = CountLossParams()) -> float:
    """Value of :func:`counting_loss` without the gradient."""
    pred, target = _amplified_target(pred, gt, params)
    s = ssim(pred, target, params)
    mse = float(np.sum((pred - target) ** 2))
    return mse + (1.0 - s if params.ssim_as_dissimilarity else s)


def counting_loss(pred, gt, params: CountLossParams = CountLossParams()):
    """Squared error to the amplified target plus the SSIM term.

    With ``ssim_as_dissimilarity`` the SSIM term becomes ``1 - SSIM``.
    """
    pred, target = _amplified_target(pred, gt, params)
    diff = pred - target
    s, s_grad = ssim(pred, target, params, return_grad=True)
    if params.ssim_as_dissimilarity:
        return float(np.sum(diff * diff) + 1.0 - s), 2 * diff - s_grad
    return float(np.sum(diff * diff) + s), 2 * diff + s_grad


def det_count_loss(u: IndicatorGrid, dhat, cfg: AdaptiveSigmaConfig = AdaptiveSigmaConfig()) -> float:
    """Squared distance between the blurred candidate centers and a fixed density."""
    dhat = np.asarray(dhat, dtype=np.float64)
    if dhat.shape != u.geom.shape:
        raise ValueError(f"shape mismatch: {u.geom.shape} vs {dhat.shape}")
    r = blur_cells(u.cells(), u.geom, cfg).values - dhat
    return float(np.sum(r * r))


def det_count_loss_weighted(cells, weights, sigmas, dhat):
    """Relaxed form of :func:`det_count_loss` with a real weight per candidate.

    Kernel widths are held fixed, so the blurred map is linear in the weights.
    Returns ``(loss, grad_weights)``.
    """
    dhat = np.asarray(dhat, dtype=np.float64)
    cells = _as_cells(cells)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    sigmas = np.asarray(sigmas, dtype=np.float64).reshape(-1)
    if not len(cells) == len(weights) == len(sigmas):
        raise ValueError("cells, weights and sigmas must have equal length")
    blur = _accumulate_kernels(np.zeros(dhat.shape), cells, sigmas, weights)
    r = blur - dhat
    grad = np.empty(len(cells))
    for i in range(len(cells)):
        unit = _accumulate_kernels(np.zeros(dhat.shape), cells[i: i + 1], sigmas[i: i + 1])
        grad[i] = 2.0 * np.sum(unit * r)
    return float(np.sum(r * r)), grad


def window_count_loss(dhat, u, window: int):
    """Mean squared difference of window counts between a density and detections.

    One window is centered on every cell (zero padding), so the number of
    windows equals the number of cells. ``u`` may be an indicator grid or a
    per-cell detection count. Returns ``(loss, grad_dhat)``.
    """
    window = _check_window(window)
    dhat = np.asarray(dhat, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if dhat.shape != u.shape:
        raise ValueError(f"shape mismatch: {dhat.shape} vs {u.shape}")
    k = dhat.size
    gap = window_counts(dhat - u, window)
    loss = float(np.sum(gap * gap) / k)
    # the zero-padded centered box filter is self-adjoint
    grad = 2.0 / k * window_counts(gap, window)
    return loss, grad


def reid_loss(batch: ReidBatch):
    """Softmax cross-entropy summed over objects. Returns ``(loss, grad_logits)``."""
    z = batch.logits - batch.logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logq = z - logsumexp
    idx = np.arange(len(batch.labels))
    loss = float(-logq[idx, batch.labels].sum())
    grad = np.exp(logq)
    grad[idx, batch.labels] -= 1.0
    return loss, grad


def total_loss(l_det_dc: float, l_cnt_cd: float, l_id: float, w: UncertaintyWeights = UncertaintyWeights()):
    """Uncertainty-weighted sum of the three task losses.

    Returns ``(loss, grad_w)`` with ``grad_w`` over ``(w1, w2, w3)``.
    """
    comps = np.array([l_det_dc, l_cnt_cd, l_id], dtype=np.float64)
    if not np.all(np.isfinite(comps)):
        raise ValueError("component losses must be finite")
    ws = w.as_array()
    scaled = np.exp(-ws) * comps
    loss = 0.5 * scaled.sum() + ws.sum()
    return float(loss), 1.0 - 0.5 * scaled


def optimal_uncertainty_weights(l_det_dc: float, l_cnt_cd: float, l_id: float) -> UncertaintyWeights:
    """Closed-form minimizer of :func:`total_loss` over the weights (positive losses)."""
    vals = [math.log(v / 2.0) for v in (l_det_dc, l_cnt_cd, l_id)]
    return UncertaintyWeights(*vals)
