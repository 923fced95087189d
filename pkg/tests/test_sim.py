import numpy as np
import pytest
from scipy.stats import spearmanr

from crowdtrack import sim
from crowdtrack.density import AdaptiveSigmaConfig, adaptive_sigmas
from crowdtrack.model import center_to_grid, iou_matrix


def test_noiseless_detections_equal_ground_truth():
    scene = sim.generate(sim.noiseless(sim.preset("sparse", n_frames=10)))
    for dets, gt in zip(scene.detections, scene.gt):
        assert [d.bbox for d in dets] == [b for _, b in gt]
    assert scene.miss_rate() == 0.0 and scene.fp_per_frame() == 0.0


def test_same_seed_writes_identical_bytes(tmp_path):
    cfg = sim.preset("crowded", n_frames=5)
    a = sim.generate(cfg).write(tmp_path / "a")
    b = sim.generate(cfg).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    c = sim.generate(sim.preset("crowded", n_frames=5, seed=12)).write(tmp_path / "c")
    assert a["det"].read_bytes() != c["det"].read_bytes()


def test_misses_follow_occlusion():
    cfg = sim.preset("crowded", n_frames=30, occlusion_miss_base=0.0, occlusion_miss_gain=0.8)
    scene = sim.generate(cfg)
    occ, missed = [], []
    for gt, src in zip(scene.gt, scene.det_sources):
        arr = np.array([b.to_tuple() for _, b in gt])
        ious = iou_matrix(arr, arr)
        bottom = arr[:, 1] + arr[:, 3]
        occ += list(np.where(bottom[None, :] > bottom[:, None], ious, 0).max(axis=1))
        found = set(src)
        missed += [ident not in found for ident, _ in gt]
    rho, _ = spearmanr(occ, missed)
    assert rho > 0


def test_presets():
    assert sim.preset("sparse").n_agents == 8
    assert sim.preset("crowded").n_agents == 40
    assert sim.preset("crowded", n_frames=3).n_frames == 3
    with pytest.raises(KeyError, match="unknown preset"):
        sim.preset("nope")


def _interior(cells, sigmas, geom):
    rad = np.ceil(3 * sigmas)
    rows, cols = geom.shape
    x, y = cells[:, 0], cells[:, 1]
    return bool(np.all((x >= rad) & (x + rad < cols) & (y >= rad) & (y + rad < rows)))


def test_density_mass_equals_agent_count_when_interior():
    sig = AdaptiveSigmaConfig(sigma_cap=4)
    scene = sim.generate(sim.SimConfig(seed=1, width=1088, height=608, n_agents=5, n_frames=40, sigma=sig))
    checked = 0
    for gt, dens in zip(scene.gt, scene.densities):
        cells = np.array([center_to_grid(b.center(), scene.geom)[0] for _, b in gt])
        if _interior(cells, adaptive_sigmas(cells, sig), scene.geom):
            checked += 1
            assert dens.total == pytest.approx(len(gt), abs=1e-3 * len(gt))
    assert checked > 0


def test_density_mass_never_exceeds_agent_count():
    scene = sim.generate(sim.preset("sparse", n_frames=20))
    for dens, n in zip(scene.densities, scene.gt_counts()):
        assert dens.total <= n + 1e-3 * n


def test_crowded_misses_more_than_sparse():
    sparse = sim.generate(sim.preset("sparse"))
    crowded = sim.generate(sim.preset("crowded"))
    assert crowded.miss_rate() > sparse.miss_rate()


def test_scene_files_round_trip(tmp_path):
    scene = sim.generate(sim.preset("crowded", n_frames=4))
    paths = scene.write(tmp_path)
    frames, dens = sim.load_scene_files(paths["det"], paths["density"], paths["embeddings"])
    assert len(frames) == 4 and len(dens) == 4
    for got, want in zip(frames, scene.detections):
        assert [d.bbox for d in got] == [d.bbox for d in want]
        assert [d.confidence for d in got] == [d.confidence for d in want]
        for a, b in zip(got, want):
            np.testing.assert_array_equal(a.embedding, b.embedding)
    for a, b in zip(dens, scene.densities):
        np.testing.assert_array_equal(a.values, b.values)


def test_config_validation():
    with pytest.raises(ValueError):
        sim.SimConfig(occlusion_miss_gain=1.5)
    with pytest.raises(ValueError):
        sim.SimConfig(n_frames=0)
