import math

import numpy as np
import pytest

from crowdtrack import gradcheck
from crowdtrack.density import IndicatorGrid, adaptive_sigmas, density_from_centers, indicator_blur
from crowdtrack.losses import (
    CountLossParams, ReidBatch, UncertaintyWeights, counting_loss, counting_loss_value, det_count_loss,
    det_count_loss_weighted, focal_center_loss, optimal_uncertainty_weights, reid_loss, scale_offset_loss, ssim,
    total_loss, window_count_loss,
)
from crowdtrack.model import GridGeometry

from oracles import naive_ssim

GEOM = GridGeometry(128, 128, 4)


def test_focal_perfect_prediction_limit():
    gt = np.zeros((6, 6))
    gt[2, 3] = 1.0
    losses = []
    for eps in (1e-2, 1e-3, 1e-4):
        pred = np.where(gt == 1, 1 - eps, 0.0)
        losses.append(focal_center_loss(pred, gt)[0])
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-6


def test_focal_single_cell_value():
    gt = np.zeros((5, 5))
    gt[1, 1] = 1.0
    pred = np.zeros((5, 5))
    pred[1, 1] = 0.5
    loss, _ = focal_center_loss(pred, gt)
    assert loss == pytest.approx(0.25 * math.log(2), rel=1e-9)


def test_focal_needs_a_positive():
    with pytest.raises(ValueError):
        focal_center_loss(np.full((3, 3), 0.5), np.zeros((3, 3)))


def test_scale_offset_examples():
    assert scale_offset_loss([[3, 4]], [[3, 4]], [[0.5, 0.5]], [[0.5, 0.5]])[0] == 0
    loss, _ = scale_offset_loss([[11, 22]], [[10, 20]], [[0.7, 0.2]], [[0.2, 0.2]])
    assert loss == pytest.approx(3.5)
    with pytest.raises(ValueError):
        scale_offset_loss([[1, 1]], [[1, 1], [2, 2]], [[0, 0]], [[0, 0]])


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(0)
    x = rng.random((16, 16))
    assert ssim(x, x) == pytest.approx(1.0)
    # zero mean inside every window, not just overall
    i, j = np.indices((16, 16))
    z = np.where((i + j) % 2 == 0, 1.0, -1.0)
    assert ssim(z, -z) <= 0
    assert ssim(z, -z) == pytest.approx(-1.0, abs=1e-2)


def test_ssim_matches_naive_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-6)


def test_ssim_shape_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_counting_loss_examples():
    rng = np.random.default_rng(2)
    gt = rng.random((16, 16))
    params = CountLossParams(mu=10.0)
    loss, grad = counting_loss(10.0 * gt, gt, params)
    assert loss == pytest.approx(1.0)
    zero = np.zeros((16, 16))
    assert counting_loss_value(zero, zero) == pytest.approx(1.0)
    dis = CountLossParams(mu=10.0, ssim_as_dissimilarity=True)
    assert counting_loss(10.0 * gt, gt, dis)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        counting_loss(zero, np.zeros((16, 15)))


def test_det_count_loss_examples():
    cells = [(10, 12), (20, 8)]
    u = IndicatorGrid.from_cells(cells, GEOM)
    assert det_count_loss(u, indicator_blur(u).values) == pytest.approx(0.0, abs=1e-20)
    blob = density_from_centers([(16, 16)], [2.0], GEOM).values
    assert det_count_loss(IndicatorGrid.empty(GEOM), blob) == pytest.approx(float(np.sum(blob ** 2)))


def test_det_count_weighted_consistent_with_binary():
    cells = [(10, 12), (20, 8), (5, 25)]
    sig = adaptive_sigmas(cells)
    dhat = np.random.default_rng(3).random((32, 32)) * 0.01
    loss, _ = det_count_loss_weighted(cells, np.ones(3), sig, dhat)
    assert loss == pytest.approx(det_count_loss(IndicatorGrid.from_cells(cells, GEOM), dhat))


def test_window_count_loss_examples():
    u = np.zeros((32, 32))
    u[10, 10] = 1
    assert window_count_loss(u, u, 3)[0] == 0
    loss, _ = window_count_loss(np.zeros((32, 32)), u, 3)
    assert loss == pytest.approx(9 / 1024)
    with pytest.raises(ValueError):
        window_count_loss(u, u, 2)


def test_reid_examples():
    n_ids = 7
    loss, _ = reid_loss(ReidBatch(np.zeros((3, n_ids)), [0, 3, 6]))
    assert loss == pytest.approx(3 * math.log(n_ids))
    logits = np.zeros((1, n_ids))
    logits[0, 2] = 50.0
    assert reid_loss(ReidBatch(logits, [2]))[0] < 1e-15
    with pytest.raises(ValueError):
        ReidBatch(np.zeros((1, 3)), [3])
    onehot = np.eye(3)[[1, 2]]
    assert list(ReidBatch(np.zeros((2, 3)), onehot).labels) == [1, 2]


def test_total_loss_zero_weights_and_optimum():
    loss, _ = total_loss(1.0, 2.0, 4.0, UncertaintyWeights(0, 0, 0))
    assert loss == pytest.approx(3.5)
    w = optimal_uncertainty_weights(1.0, 2.0, 4.0)
    _, grad = total_loss(1.0, 2.0, 4.0, w)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_gradients_match_finite_differences(name):
    (res,) = gradcheck.run_gradcheck([name], trials=10, tol=1e-4, seed=3)
    assert res.passed, f"{name}: {res.max_rel_error:.3e}"


def test_gradcheck_zero_tolerance_fails():
    (res,) = gradcheck.run_gradcheck(["reid"], trials=2, tol=0.0)
    assert not res.passed


def test_gradcheck_unknown_name():
    with pytest.raises(KeyError):
        gradcheck.run_gradcheck(["nope"])


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(gradcheck.numeric_grad(lambda v: float(v @ v), x), 2 * x, rtol=1e-8)
