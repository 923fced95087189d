"""CLEAR MOT, identity (IDF1) and crowd-counting metrics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .losses import CountLossParams, ssim
from .model import iou_matrix
from .track import hungarian

CSV_COLUMNS = ["sequence", "MOTA", "IDF1", "FP", "FN", "IDS", "MT", "ML", "GT", "MAE", "SSIM"]


@dataclass
class SequenceEval:
    mota: float
    idf1: float
    fp: int
    fn: int
    ids: int
    mt: int
    ml: int
    n_trajectories: int
    gt_total: int
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    counting_mae: Optional[float] = None
    counting_ssim: Optional[float] = None

    @property
    def mt_pct(self) -> float:
        return 100.0 * self.mt / self.n_trajectories if self.n_trajectories else 0.0

    @property
    def ml_pct(self) -> float:
        return 100.0 * self.ml / self.n_trajectories if self.n_trajectories else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _fields(rec) -> Tuple[int, int, Tuple[float, float, float, float]]:
    if hasattr(rec, "bbox"):
        return int(rec.frame), int(rec.id), rec.bbox.to_tuple()
    if hasattr(rec, "bb_left"):
        return int(rec.frame), int(rec.id), (rec.bb_left, rec.bb_top, rec.bb_width, rec.bb_height)
    frame, ident, x, y, w, h = rec[:6]
    return int(frame), int(ident), (float(x), float(y), float(w), float(h))


def group_by_frame(records, name: str = "records") -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """``frame -> (ids, boxes)``; rejects duplicate ``(frame, id)`` pairs."""
    frames: Dict[int, List] = defaultdict(list)
    seen = set()
    for rec in records:
        frame, ident, box = _fields(rec)
        if (frame, ident) in seen:
            raise ValueError(f"duplicate (frame, id) = ({frame}, {ident}) in {name}")
        seen.add((frame, ident))
        frames[frame].append((ident, box))
    out = {}
    for frame, items in frames.items():
        ids = np.array([i for i, _ in items], dtype=np.int64)
        boxes = np.array([b for _, b in items], dtype=np.float64).reshape(-1, 4)
        out[frame] = (ids, boxes)
    return out


_EMPTY = (np.zeros(0, dtype=np.int64), np.zeros((0, 4)))


def clear_mot(gt, hyp, iou_match: float = 0.5) -> SequenceEval:
    """CLEAR MOT counts with IoU matching.

    Correspondences from the previous frame are kept while their IoU stays at
    or above ``iou_match``; the remaining objects are matched by a minimum-cost
    assignment on ``1 - IoU``.
    """
    gtf = group_by_frame(gt, "gt")
    hyf = group_by_frame(hyp, "hyp")
    fp = fn = ids = gt_total = 0
    prev: Dict[int, int] = {}
    last: Dict[int, int] = {}
    present: Dict[int, int] = defaultdict(int)
    matched: Dict[int, int] = defaultdict(int)
    for frame in sorted(set(gtf) | set(hyf)):
        g_ids, g_boxes = gtf.get(frame, _EMPTY)
        h_ids, h_boxes = hyf.get(frame, _EMPTY)
        gt_total += len(g_ids)
        for g in g_ids:
            present[int(g)] += 1
        ious = iou_matrix(g_boxes, h_boxes)
        g_pos = {int(g): i for i, g in enumerate(g_ids)}
        h_pos = {int(h): j for j, h in enumerate(h_ids)}
        pairs = []
        for g, h in prev.items():
            if g in g_pos and h in h_pos and ious[g_pos[g], h_pos[h]] >= iou_match:
                pairs.append((g_pos[g], h_pos[h]))
        used_r = {r for r, _ in pairs}
        used_c = {c for _, c in pairs}
        rows = [i for i in range(len(g_ids)) if i not in used_r]
        cols = [j for j in range(len(h_ids)) if j not in used_c]
        if rows and cols:
            sub = ious[np.ix_(rows, cols)]
            extra, _, _ = hungarian(1.0 - sub, sub < iou_match)
            pairs += [(rows[r], cols[c]) for r, c in extra]
        cur = {}
        for r, c in pairs:
            g, h = int(g_ids[r]), int(h_ids[c])
            if g in last and last[g] != h:
                ids += 1
            last[g] = h
            cur[g] = h
            matched[g] += 1
        prev = cur
        fp += len(h_ids) - len(pairs)
        fn += len(g_ids) - len(pairs)
    mt = sum(1 for g, n in present.items() if matched[g] >= 0.8 * n)
    ml = sum(1 for g, n in present.items() if matched[g] <= 0.2 * n)
    mota = 1.0 - (fp + fn + ids) / gt_total if gt_total else float("nan")
    return SequenceEval(
        mota=mota, idf1=float("nan"), fp=fp, fn=fn, ids=ids, mt=mt, ml=ml,
        n_trajectories=len(present), gt_total=gt_total,
    )


def id_scores(gt, hyp, iou_match: float = 0.5) -> Tuple[int, int, int]:
    """``(IDTP, IDFP, IDFN)`` under the best one-to-one identity matching."""
    gtf = group_by_frame(gt, "gt")
    hyf = group_by_frame(hyp, "hyp")
    n_gt = sum(len(v[0]) for v in gtf.values())
    n_hyp = sum(len(v[0]) for v in hyf.values())
    g_all = sorted({int(g) for ids_, _ in gtf.values() for g in ids_})
    h_all = sorted({int(h) for ids_, _ in hyf.values() for h in ids_})
    if not g_all or not h_all:
        return 0, n_hyp, n_gt
    gi = {g: i for i, g in enumerate(g_all)}
    hi = {h: j for j, h in enumerate(h_all)}
    overlap = np.zeros((len(g_all), len(h_all)))
    for frame in set(gtf) & set(hyf):
        g_ids, g_boxes = gtf[frame]
        h_ids, h_boxes = hyf[frame]
        ok = iou_matrix(g_boxes, h_boxes) >= iou_match
        for r, c in zip(*np.nonzero(ok)):
            overlap[gi[int(g_ids[r])], hi[int(h_ids[c])]] += 1
    rows, cols = linear_sum_assignment(-overlap)
    idtp = int(overlap[rows, cols].sum())
    return idtp, n_hyp - idtp, n_gt - idtp


def idf1(gt, hyp, iou_match: float = 0.5) -> float:
    idtp, idfp, idfn = id_scores(gt, hyp, iou_match)
    denom = 2 * idtp + idfp + idfn
    return 2 * idtp / denom if denom else 1.0


def evaluate(gt, hyp, iou_match: float = 0.5) -> SequenceEval:
    gt, hyp = list(gt), list(hyp)
    ev = clear_mot(gt, hyp, iou_match)
    ev.idtp, ev.idfp, ev.idfn = id_scores(gt, hyp, iou_match)
    denom = 2 * ev.idtp + ev.idfp + ev.idfn
    ev.idf1 = 2 * ev.idtp / denom if denom else 1.0
    return ev


def counting_eval(pred_density: Sequence, gt_count: Sequence[int], gt_density: Sequence,
                  params: CountLossParams = CountLossParams()) -> Tuple[float, float]:
    """Mean absolute count error and mean frame-wise SSIM."""
    if not len(pred_density) == len(gt_count) == len(gt_density):
        raise ValueError("pred_density, gt_count and gt_density must have equal length")
    if not len(pred_density):
        raise ValueError("counting_eval needs at least one frame")
    errs, sims = [], []
    for pred, n, gtd in zip(pred_density, gt_count, gt_density):
        pred = np.asarray(pred, dtype=np.float64)
        errs.append(abs(float(pred.sum()) - n))
        sims.append(ssim(pred, np.asarray(gtd, dtype=np.float64), params))
    return float(np.mean(errs)), float(np.mean(sims))


def _fmt(v, spec):
    return "" if v is None else format(v, spec)


def csv_row(name: str, ev: SequenceEval) -> List[str]:
    return [
        name, f"{ev.mota:.6f}", f"{ev.idf1:.6f}", str(ev.fp), str(ev.fn), str(ev.ids),
        str(ev.mt), str(ev.ml), str(ev.gt_total),
        _fmt(ev.counting_mae, ".6f"), _fmt(ev.counting_ssim, ".6f"),
    ]


def format_table(rows: Dict[str, SequenceEval]) -> str:
    head = f"{'sequence':<16}{'MOTA':>8}{'IDF1':>8}{'FP':>7}{'FN':>7}{'IDS':>6}{'MT':>9}{'ML':>9}"
    with_cnt = any(ev.counting_mae is not None for ev in rows.values())
    if with_cnt:
        head += f"{'MAE':>9}{'SSIM':>8}"
    lines = [head]
    for name, ev in rows.items():
        line = (
            f"{name:<16}{ev.mota:>8.3f}{ev.idf1:>8.3f}{ev.fp:>7d}{ev.fn:>7d}{ev.ids:>6d}"
            f"{ev.mt_pct:>8.1f}%{ev.ml_pct:>8.1f}%"
        )
        if with_cnt:
            line += f"{_fmt(ev.counting_mae, '.3f'):>9}{_fmt(ev.counting_ssim, '.3f'):>8}"
        lines.append(line)
    return "\n".join(lines)
