import math

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crowdtrack import io as fio
from crowdtrack.density import blur_cells, density_from_centers, window_counts
from crowdtrack.model import BBox, Detection, GridGeometry, iou, iou_matrix
from crowdtrack.refine import RefineConfig, count_gap, refine_frame
from crowdtrack.track import hungarian

from oracles import brute_force_assignment, naive_window_sums

GEOM = GridGeometry(256, 256, 4)
SLOW = settings(max_examples=30, deadline=None)

grids = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
               elements=st.floats(0, 10, allow_nan=False))
windows = st.integers(0, 6).map(lambda k: 2 * k + 1)
boxes = st.builds(
    BBox,
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40),
)
cells = st.tuples(st.integers(0, 63), st.integers(0, 63))


@given(grids, windows)
def test_window_counts_match_naive(g, w):
    np.testing.assert_allclose(window_counts(g, w), naive_window_sums(g, w), rtol=1e-9, atol=1e-9)


@given(st.lists(st.tuples(st.integers(20, 43), st.integers(20, 43)), min_size=1, max_size=10),
       st.floats(0.5, 3.0))
def test_interior_mass_is_conserved(centers, sigma):
    d = density_from_centers(centers, np.full(len(centers), sigma), GEOM)
    assert math.isclose(d.total, len(centers), rel_tol=1e-3)


@SLOW
@given(st.lists(cells, min_size=1, max_size=12),
       st.lists(st.tuples(cells, st.floats(0.05, 1.0)), max_size=12))
def test_refine_never_increases_count_gap(people, found):
    dhat = blur_cells(people, GEOM)
    dets = [Detection(BBox.from_center(*GEOM.cell_center(c), 24, 60), conf) for c, conf in found]
    cfg = RefineConfig()
    refined, rep = refine_frame(dets, dhat, cfg)
    assert rep.final_count_gap <= rep.initial_count_gap + 1e-9
    assert math.isclose(rep.final_count_gap, count_gap(refined, dhat, cfg.window),
                        rel_tol=1e-9, abs_tol=1e-9)
    assert len(refined) == len(dets) - len(rep.removed) + len(rep.added)
    assert all(d in dets for d in rep.removed)
    assert all(d not in refined for d in rep.removed)
    assert all(d.confidence < cfg.exempt_confidence for d in rep.removed)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(0, 100, allow_nan=False)))
def test_hungarian_is_optimal(cost):
    pairs, ur, uc = hungarian(cost)
    assert len(pairs) == min(cost.shape)
    assert sorted(ur + [r for r, _ in pairs]) == list(range(cost.shape[0]))
    assert sorted(uc + [c for _, c in pairs]) == list(range(cost.shape[1]))
    best, _ = brute_force_assignment(cost)
    assert math.isclose(math.fsum(cost[r, c] for r, c in sorted(pairs)), best, rel_tol=1e-12, abs_tol=1e-12)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert math.isclose(v, iou(b, a), rel_tol=1e-12, abs_tol=1e-15)
    assert math.isclose(iou(a, a), 1.0)
    m = iou_matrix(np.array([a.to_tuple()]), np.array([b.to_tuple()]))
    assert math.isclose(m[0, 0], v, rel_tol=1e-9, abs_tol=1e-12)


two_dp = st.integers(-100000, 100000).map(lambda v: v / 100)
records = st.builds(
    fio.MotRecord,
    st.integers(1, 1000), st.integers(-1, 1000), two_dp, two_dp,
    st.integers(1, 50000).map(lambda v: v / 100), st.integers(1, 50000).map(lambda v: v / 100),
    st.integers(-100, 100).map(lambda v: v / 100),
)


@given(st.lists(records, max_size=20))
def test_mot_text_round_trip(recs):
    text = [fio.format_mot_line(r) for r in recs]
    assert fio.parse_mot_lines(text) == recs


@settings(deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 1e6, width=32)))
def test_density_round_trip(tmp_path_factory, vals):
    p = tmp_path_factory.mktemp("d") / "d.cmdg"
    fio.write_density(p, list(vals.astype(np.float64)), r=2)
    back = fio.read_density(p)
    assert len(back) == len(vals)
    for a, b in zip(back, vals):
        np.testing.assert_array_equal(a.values, b)


@given(st.floats(0, 1), st.floats(0, 1), windows, st.integers(1, 8), st.floats(0.01, 1e4))
def test_config_text_round_trip(lam, tau, window, r, mu):
    cfg = fio.RunConfig(lam=lam, tau=tau, window=window, r=r, mu=mu)
    assert fio.parse_config(cfg.to_text()) == cfg
