"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package under test except plain data types.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def knn_mean_distance(points, k):
    """Mean distance to the ``k`` nearest other points, by sorting all pairs."""
    pts = np.asarray(points, dtype=np.float64)
    out = []
    for i, p in enumerate(pts):
        d = sorted(math.dist(p, q) for j, q in enumerate(pts) if j != i)
        use = d[:k] if len(d) >= k else d
        out.append(sum(use) / len(use))
    return np.array(out)


def naive_window_sums(grid, window):
    """Sum over the ``window`` x ``window`` square centred on each cell, zero outside."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    half = window // 2
    out = np.zeros_like(g)
    for i in range(h):
        for j in range(w):
            out[i, j] = g[max(i - half, 0):i + half + 1, max(j - half, 0):j + half + 1].sum()
    return out


def naive_ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over every fully contained Gaussian window, one window at a time."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax = np.arange(size) - size // 2
    g1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g1 /= g1.sum()
    wgt = np.outer(g1, g1)
    lr = max(b.max() - b.min(), 1e-6)
    c1, c2 = (k1 * lr) ** 2, (k2 * lr) ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = (wgt * pa).sum(), (wgt * pb).sum()
            va = (wgt * pa * pa).sum() - ma * ma
            vb = (wgt * pb * pb).sum() - mb * mb
            cov = (wgt * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TextbookKalman:
    """Plain constant-velocity filter with explicit matrix inverses."""

    def __init__(self, mean, cov):
        self.x = np.array(mean, dtype=np.float64)
        self.P = np.array(cov, dtype=np.float64)
        self.F = np.eye(8)
        for i in range(4):
            self.F[i, i + 4] = 1.0
        self.H = np.zeros((4, 8))
        self.H[:, :4] = np.eye(4)

    def predict(self, q_diag):
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + np.diag(q_diag)

    def update(self, z, r_diag):
        S = self.H @ self.P @ self.H.T + np.diag(r_diag)
        K = self.P @ self.H.T @ np.linalg.inv(S)
        self.x = self.x + K @ (np.asarray(z) - self.H @ self.x)
        self.P = (np.eye(8) - K @ self.H) @ self.P


def brute_force_assignment(cost):
    """Minimum total cost over all maximal one-to-one matchings."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best, best_pairs = math.inf, None
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            pairs = list(zip(range(n), cols))
            s = math.fsum(cost[r, c] for r, c in pairs)
            if s < best:
                best, best_pairs = s, pairs
    else:
        for rows in itertools.permutations(range(n), m):
            pairs = sorted(zip(rows, range(m)))
            s = math.fsum(cost[r, c] for r, c in pairs)
            if s < best:
                best, best_pairs = s, pairs
    return best, best_pairs


def _box_iou(a, b):
    ix = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    iy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _best_matching(g_items, h_items, thr):
    """Most pairs with IoU >= thr, then the largest total IoU, by enumeration."""
    best_key, best = (-1, -math.inf), []
    hs = list(range(len(h_items)))
    for k in range(min(len(g_items), len(h_items)), -1, -1):
        for gs in itertools.combinations(range(len(g_items)), k):
            for hp in itertools.permutations(hs, k):
                ious = [_box_iou(g_items[g][1], h_items[h][1]) for g, h in zip(gs, hp)]
                if all(v >= thr for v in ious):
                    key = (k, math.fsum(ious))
                    if key > best_key:
                        best_key, best = key, list(zip(gs, hp))
        if best_key[0] == k:
            break
    return best


def brute_clear_mot(gt, hyp, thr=0.5):
    """CLEAR MOT counts with per-frame exhaustive matching.

    ``gt`` and ``hyp`` are lists of ``(frame, id, (x, y, w, h))``.
    """
    frames = sorted({f for f, _, _ in gt} | {f for f, _, _ in hyp})
    prev, last = {}, {}
    fp = fn = ids = total = 0
    for f in frames:
        g_items = [(i, b) for fr, i, b in gt if fr == f]
        h_items = [(i, b) for fr, i, b in hyp if fr == f]
        total += len(g_items)
        keep = []
        for gi, (g, gb) in enumerate(g_items):
            for hi, (h, hb) in enumerate(h_items):
                if prev.get(g) == h and _box_iou(gb, hb) >= thr:
                    keep.append((gi, hi))
        used_g = {a for a, _ in keep}
        used_h = {b for _, b in keep}
        rest_g = [x for i, x in enumerate(g_items) if i not in used_g]
        rest_h = [x for i, x in enumerate(h_items) if i not in used_h]
        pairs = [(g_items[a][0], h_items[b][0]) for a, b in keep]
        pairs += [(rest_g[a][0], rest_h[b][0]) for a, b in _best_matching(rest_g, rest_h, thr)]
        cur = {}
        for g, h in pairs:
            if g in last and last[g] != h:
                ids += 1
            last[g] = h
            cur[g] = h
        prev = cur
        fp += len(h_items) - len(pairs)
        fn += len(g_items) - len(pairs)
    return {"fp": fp, "fn": fn, "ids": ids, "mota": 1 - (fp + fn + ids) / total}


def brute_idf1(gt, hyp, thr=0.5):
    """IDF1 by trying every one-to-one identity mapping."""
    g_ids = sorted({i for _, i, _ in gt})
    h_ids = sorted({i for _, i, _ in hyp})
    overlap = {}
    for f, g, gb in gt:
        for f2, h, hb in hyp:
            if f2 == f and _box_iou(gb, hb) >= thr:
                overlap[g, h] = overlap.get((g, h), 0) + 1
    best = 0
    if len(g_ids) <= len(h_ids):
        for perm in itertools.permutations(h_ids, len(g_ids)):
            best = max(best, sum(overlap.get((g, h), 0) for g, h in zip(g_ids, perm)))
    else:
        for perm in itertools.permutations(g_ids, len(h_ids)):
            best = max(best, sum(overlap.get((g, h), 0) for g, h in zip(perm, h_ids)))
    denom = len(gt) + len(hyp)
    return 2 * best / denom if denom else 1.0
