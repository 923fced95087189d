import numpy as np
import pytest

from crowdtrack.density import (
    AdaptiveSigmaConfig, DensityGrid, IndicatorGrid, IntegralImage, KernelSpec, adaptive_sigmas, blur_cells,
    density_from_centers, gaussian_kernel, heatmap_from_boxes, heatmap_sigma, indicator_blur, training_targets,
    window_counts,
)
from crowdtrack.model import BBox, GeometryError, GridGeometry, center_to_grid

from oracles import knn_mean_distance, naive_window_sums

GEOM = GridGeometry(128, 128, 4)  # 32 x 32 grid


def test_heatmap_empty_and_single_peak():
    assert not heatmap_from_boxes([], GEOM).any()
    box = BBox.from_center(50, 70, 20, 40)
    hm = heatmap_from_boxes([box], GEOM)[:, :, 0]
    (cx, cy), _ = center_to_grid(box.center(), GEOM)
    assert hm[cy, cx] == 1.0
    assert hm.max() == 1.0


def test_heatmap_overlap_is_elementwise_max():
    a = BBox.from_center(22, 62, 16, 40)
    b = BBox.from_center(102, 62, 24, 48)
    hm = heatmap_from_boxes([a, b], GEOM)[:, :, 0]
    ca, _ = center_to_grid(a.center(), GEOM)
    cb, _ = center_to_grid(b.center(), GEOM)
    assert hm[ca[1], ca[0]] == 1.0 and hm[cb[1], cb[0]] == 1.0
    mid = ((ca[0] + cb[0]) // 2, ca[1])

    def direct(c, box):
        s = heatmap_sigma(box, GEOM)
        return np.exp(-((mid[0] - c[0]) ** 2 + (mid[1] - c[1]) ** 2) / (2 * s * s))

    assert hm[mid[1], mid[0]] == pytest.approx(max(direct(ca, a), direct(cb, b)), rel=1e-12)


def test_heatmap_classes():
    boxes = [BBox.from_center(20, 20, 8, 8), BBox.from_center(80, 80, 8, 8)]
    hm = heatmap_from_boxes(boxes, GEOM, num_classes=2, class_ids=[0, 1])
    assert hm.shape == (32, 32, 2)
    assert hm[5, 5, 0] == 1.0 and hm[20, 20, 1] == 1.0
    with pytest.raises(ValueError):
        heatmap_from_boxes(boxes, GEOM, num_classes=1, class_ids=[0, 1])


def test_adaptive_sigmas_edge_cases():
    cfg = AdaptiveSigmaConfig()
    with pytest.raises(ValueError):
        adaptive_sigmas([], cfg)
    assert adaptive_sigmas([(4, 4)], cfg)[0] == cfg.sigma_cap / 2
    coincident = adaptive_sigmas([(3, 3)] * 5, cfg)
    assert np.all(coincident == cfg.sigma_floor)
    far = adaptive_sigmas([(0, 0), (1000, 0)], cfg)
    assert np.all(far == cfg.sigma_cap)


def test_adaptive_sigmas_match_knn_oracle():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 60, size=(10, 2))
    cfg = AdaptiveSigmaConfig(k=3, gamma=0.3, sigma_floor=0.1, sigma_cap=100)
    np.testing.assert_allclose(adaptive_sigmas(pts, cfg), 0.3 * knn_mean_distance(pts, 3), rtol=1e-12)
    # fewer than k neighbours: average over all of them
    np.testing.assert_allclose(adaptive_sigmas(pts[:3], cfg), 0.3 * knn_mean_distance(pts[:3], 3), rtol=1e-12)


def test_density_single_and_many_interior_centers():
    d = density_from_centers([(16, 16)], [2.5], GEOM)
    assert d.total == pytest.approx(1.0, abs=1e-6)
    rng = np.random.default_rng(4)
    cells = rng.integers(8, 24, size=(25, 2))
    d = density_from_centers(cells, np.full(25, 2.0), GEOM)
    assert d.total == pytest.approx(25.0, abs=25e-4)


def test_density_corner_truncation_matches_kernel_weights():
    d = density_from_centers([(0, 0)], [2.0], GEOM)
    k = gaussian_kernel(KernelSpec(2.0))
    rad = k.shape[0] // 2
    oracle = k[rad:, rad:].sum()
    assert d.total < 1.0
    assert d.total == pytest.approx(oracle, rel=1e-12)


def test_density_rejects_outside_center():
    with pytest.raises(GeometryError):
        density_from_centers([(32, 0)], [1.0], GEOM)


def test_indicator_blur_cases():
    assert indicator_blur(IndicatorGrid.empty(GEOM)).total == 0
    # a lone center gets sigma_cap / 2, whose 3-sigma support needs a larger grid
    big = GridGeometry(256, 256, 4)
    one = indicator_blur(IndicatorGrid.from_cells([(30, 33)], big))
    assert one.total == pytest.approx(1.0, abs=1e-9)
    assert np.unravel_index(one.values.argmax(), one.values.shape) == (33, 30)


def test_indicator_blur_equals_density_from_centers():
    rng = np.random.default_rng(5)
    flat = rng.choice(32 * 32, size=20, replace=False)
    cells = [(int(i % 32), int(i // 32)) for i in flat]
    u = IndicatorGrid.from_cells(cells, GEOM)
    ref = density_from_centers(cells, adaptive_sigmas(cells), GEOM)
    np.testing.assert_allclose(indicator_blur(u).values, ref.values, atol=1e-9, rtol=0)


def test_blur_cells_allows_duplicates():
    d = blur_cells([(10, 10), (10, 10)], GEOM)
    assert d.total == pytest.approx(2.0, abs=1e-9)


def test_window_counts_examples():
    u = np.zeros((32, 32))
    u[5, 5] = 1
    c = window_counts(u, 3)
    expect = np.zeros_like(u)
    expect[4:7, 4:7] = 1
    np.testing.assert_array_equal(c, expect)
    g = np.random.default_rng(6).random((32, 32))
    np.testing.assert_array_equal(window_counts(g, 1), g)
    with pytest.raises(ValueError):
        window_counts(g, 4)


def test_window_counts_match_naive_oracle():
    g = np.random.default_rng(7).random((32, 32))
    np.testing.assert_allclose(window_counts(g, 19), naive_window_sums(g, 19), rtol=1e-12)


def test_integral_image_rect_and_box_sums():
    g = np.random.default_rng(8).random((9, 13))
    ii = IntegralImage(g)
    assert ii.rect_sum(2, 3, 7, 11) == pytest.approx(g[2:7, 3:11].sum())
    r0 = np.array([-3, 0, 4])
    c0 = np.array([-1, 5, 10])
    got = ii.box_sums(r0, c0, r0 + 5, c0 + 5)
    for a, b, v in zip(r0, c0, got):
        assert v == pytest.approx(g[max(a, 0):a + 5, max(b, 0):b + 5].sum())


def test_density_grid_validation():
    with pytest.raises(GeometryError):
        DensityGrid(np.zeros((3, 3)), GEOM)
    with pytest.raises(ValueError):
        DensityGrid(-np.ones(GEOM.shape), GEOM)


def test_training_targets_layout():
    boxes = [BBox.from_center(22, 30, 10, 20), BBox.from_center(90, 70, 12, 30)]
    t = training_targets(boxes, [0, 2], 3, GEOM)
    assert t.mask.sum() == 2
    assert t.indicator.count == 2
    np.testing.assert_allclose(t.density.values, blur_cells(t.cells, GEOM).values, atol=1e-12)
    (cx, cy), (ox, oy) = center_to_grid(boxes[0].center(), GEOM)
    assert tuple(t.scale[cy, cx]) == (20, 10)
    assert tuple(t.offset[cy, cx]) == pytest.approx((ox, oy))
    np.testing.assert_array_equal(t.identity, [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        training_targets(boxes + boxes[:1], [0, 1, 2], 3, GEOM)
