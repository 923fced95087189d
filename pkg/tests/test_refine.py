import numpy as np
import pytest

from crowdtrack import sim
from crowdtrack.density import DensityGrid, blur_cells, density_from_centers
from crowdtrack.model import BBox, Detection, GridGeometry, center_to_grid, iou_matrix
from crowdtrack.refine import (
    RefineConfig, count_gap, recover_missed, refine_frame, reject_false, residual_density,
)
from crowdtrack.track import hungarian

GEOM = GridGeometry(256, 256, 4)  # 64 x 64


def det_at(cell, conf=0.9, geom=GEOM, size=(24.0, 60.0)):
    cx, cy = geom.cell_center(cell)
    return Detection(BBox.from_center(cx, cy, *size), conf)


def cell_of(det, geom=GEOM):
    return center_to_grid(det.bbox.center(), geom)[0]


def test_residual_zero_when_detections_explain_density():
    cells = [(10, 12), (30, 40), (50, 20)]
    dhat = blur_cells(cells, GEOM)
    res = residual_density([det_at(c) for c in cells], dhat)
    assert np.abs(res).max() <= 1e-6


def test_residual_of_no_detections_is_density():
    dhat = density_from_centers([(20, 20)], [2.0], GEOM)
    np.testing.assert_array_equal(residual_density([], dhat), dhat.values)


def test_residual_blob_masses():
    geom = GridGeometry(512, 256, 4)
    dhat = density_from_centers([(25, 32)], [2.0], geom)
    res = residual_density([det_at((95, 32), geom=geom)], dhat)
    assert res[:, :60].sum() == pytest.approx(1.0, abs=1e-6)
    assert res[:, 60:].sum() == pytest.approx(-1.0, abs=1e-6)


def test_recover_nothing_on_zero_residual():
    cells = [(10, 12), (30, 40)]
    assert recover_missed([det_at(c) for c in cells], blur_cells(cells, GEOM)) == []
    assert recover_missed([], DensityGrid(np.zeros(GEOM.shape), GEOM)) == []


def test_recover_single_blob_at_argmax():
    dhat = density_from_centers([(30, 27)], [2.0], GEOM)
    (added,) = recover_missed([], dhat)
    r, c = np.unravel_index(np.argmax(dhat.values), dhat.values.shape)
    assert cell_of(added) == (c, r) == (30, 27)
    cfg = RefineConfig()
    assert added.confidence == cfg.recovered_confidence
    assert (added.bbox.w, added.bbox.h) == cfg.default_box


def test_recover_two_separated_blobs():
    cfg = RefineConfig()
    geom = GridGeometry(320, 256, 4)
    a, b = (8, 30), (8 + 3 * cfg.window, 30)
    dhat = density_from_centers([a, b], [2.0, 2.0], geom)
    added = recover_missed([], dhat, cfg)
    assert sorted(cell_of(d, geom) for d in added) == [a, b]


def test_recovered_box_takes_nearby_sizes():
    dets = [det_at((20, 30), size=(20.0, 50.0)), det_at((24, 30), size=(30.0, 70.0))]
    dhat = blur_cells([(20, 30), (24, 30), (28, 30)], GEOM)
    (added,) = recover_missed(dets, dhat)
    assert (added.bbox.w, added.bbox.h) == pytest.approx((25.0, 60.0))


def test_recover_respects_cap_and_separation():
    centers = [(x, y) for x in range(8, 60, 10) for y in range(8, 60, 10)]
    dhat = density_from_centers(centers, np.full(len(centers), 2.0), GEOM)
    assert len(recover_missed([], dhat, RefineConfig(max_added_per_frame=4))) == 4
    cfg = RefineConfig(min_peak_separation=12)
    cells = [cell_of(d) for d in recover_missed([], dhat, cfg)]
    for i, p in enumerate(cells):
        for q in cells[:i]:
            assert np.hypot(p[0] - q[0], p[1] - q[1]) >= 12


CROWD = [(x, y) for x in range(14, 50, 7) for y in range(16, 48, 8)]


def test_reject_keeps_consistent_detections():
    dets = [det_at(c, conf=0.3) for c in CROWD]
    assert reject_false(dets, blur_cells(CROWD, GEOM)) == []


def test_reject_unsupported_low_confidence():
    zero = DensityGrid(np.zeros(GEOM.shape), GEOM)
    det = det_at((30, 30), conf=0.3)
    before = count_gap([det], zero, 19)
    assert reject_false([det], zero) == [det]
    assert count_gap([], zero, 19) < before
    # confident detections are exempt
    assert reject_false([det_at((30, 30), conf=0.9)], zero) == []


def test_reject_only_the_weaker_of_a_duplicate_pair():
    dhat = density_from_centers([(30, 30)], [2.0], GEOM)
    strong, weak = det_at((30, 30), 0.9), det_at((31, 30), 0.3)
    assert reject_false([strong, weak], dhat) == [weak]


@pytest.mark.parametrize("conf", [0.9, 0.3])
def test_refine_perfect_detections_is_noop(conf):
    dets = [det_at(c, conf) for c in CROWD]
    refined, rep = refine_frame(dets, blur_cells(CROWD, GEOM))
    assert refined == dets
    assert rep.added == [] and rep.removed == []
    assert rep.initial_count_gap == rep.final_count_gap


def test_refine_crowd_scene_one_removed_two_added():
    # four people side by side; two are found, two missed, and one weak
    # detection sits on empty ground
    people = [(20, 30), (26, 30), (32, 30), (38, 30)]
    dhat = blur_cells(people, GEOM)
    stray = det_at((29, 50), conf=0.4)
    dets = [det_at(people[0]), det_at(people[1]), stray]
    refined, rep = refine_frame(dets, dhat)
    assert rep.removed == [stray]
    assert sorted(cell_of(d) for d in rep.added) == people[2:]
    assert rep.final_count_gap < rep.initial_count_gap
    assert len(refined) == len(dets) - len(rep.removed) + len(rep.added)


def _false_negatives(dets, gt_boxes):
    if not dets:
        return len(gt_boxes)
    d = np.array([x.bbox.to_tuple() for x in dets])
    g = np.array([b.to_tuple() for b in gt_boxes])
    ious = iou_matrix(g, d)
    pairs, _, _ = hungarian(1 - ious, ious < 0.5)
    return len(gt_boxes) - len(pairs)


def test_refine_lowers_false_negatives_on_simulated_frames():
    scene = sim.generate(sim.preset("crowded", n_frames=10))
    before = after = 0
    for dets, gt, dens in zip(scene.detections, scene.gt, scene.densities):
        boxes = [b for _, b in gt]
        refined, rep = refine_frame(dets, dens)
        before += _false_negatives(dets, boxes)
        after += _false_negatives(refined, boxes)
        assert rep.final_count_gap <= rep.initial_count_gap
    assert after < before


def test_refine_is_deterministic():
    scene = sim.generate(sim.preset("crowded", n_frames=3))
    for dets, dens in zip(scene.detections, scene.densities):
        a, ra = refine_frame(dets, dens)
        b, rb = refine_frame(dets, dens)
        assert a == b and ra.to_json(1) == rb.to_json(1)


def test_refine_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(window=18)
    with pytest.raises(ValueError):
        RefineConfig(add_mass_threshold=0)
    with pytest.raises(ValueError):
        RefineConfig(recovered_confidence=1.0)


def test_report_json_shape():
    dhat = density_from_centers([(30, 27)], [2.0], GEOM)
    _, rep = refine_frame([], dhat)
    js = rep.to_json(4)
    assert js["frame"] == 4 and len(js["added"]) == 1 and js["removed"] == []
    assert js["final_count_gap"] < js["initial_count_gap"]
