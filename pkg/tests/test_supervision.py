import math
import warnings

import numpy as np
import pytest

from harvestkit.errors import InputError, NumericError
from harvestkit.supervision import (
    Heatmap,
    LossConfig,
    focal_loss,
    focal_loss_cells,
    focal_loss_grad,
    gaussian_heatmap,
    grid_shape,
    master_heatmap,
    read_grid,
    regression_targets,
    write_grid,
)

from conftest import make_box


def focal_by_hand(yhat, y, alpha=2.0, beta=4.0, m=1):
    """Cell-by-cell transcription of the penalty-reduced focal loss."""
    total = 0.0
    for p, t in zip(np.ravel(yhat).tolist(), np.ravel(y).tolist()):
        p = min(max(p, 1e-12), 1 - 1e-12)
        if t == 1.0:
            total += (1 - p) ** alpha * math.log(p)
        else:
            total += (1 - t) ** beta * p ** alpha * math.log(1 - p)
    return -total / m


def random_target(rng, shape):
    y = rng.uniform(0, 0.99, shape)
    y[rng.random(shape) < 0.1] = 1.0
    neg = rng.random(shape) < 0.1
    y[neg] = -rng.uniform(0.01, 1.0, neg.sum())
    return y


class TestGaussian:
    def test_grid_shape_rounds_up(self):
        assert grid_shape(width=10, height=7, stride=4) == (2, 3)

    def test_peak_and_one_sigma(self):
        # 48 px wide at stride 4 gives sigma_x = 2 cells
        h = gaussian_heatmap([make_box(8, 8, 56, 56)], 64, 64, 4).values
        assert h[8, 8] == 1.0
        assert h[8, 10] == pytest.approx(math.exp(-0.5), rel=1e-15)
        assert h[8, 10] == pytest.approx(0.60653, abs=1e-5)

    def test_small_boxes_clamp_sigma_to_one_cell(self):
        h = gaussian_heatmap([make_box(0, 0, 8, 8)], 32, 32, 4).values
        assert h[1, 2] == pytest.approx(math.exp(-0.5))

    def test_duplicates_are_idempotent(self):
        b = make_box(10, 10, 30, 40)
        one = gaussian_heatmap([b], 64, 64).values
        assert np.array_equal(gaussian_heatmap([b, b], 64, 64).values, one)

    def test_max_combination_keeps_peaks(self):
        boxes = [make_box(0, 0, 20, 20), make_box(8, 8, 28, 28)]
        h = gaussian_heatmap(boxes, 64, 64).values
        assert h[2, 2] == 1.0 and h[4, 4] == 1.0 and h.max() == 1.0 and h.min() >= 0.0

    def test_outside_box_rejected(self):
        with pytest.raises(InputError):
            gaussian_heatmap([make_box(50, 50, 70, 70)], 64, 64)

    def test_mask_coincides_with_peaks(self, rng):
        for _ in range(20):
            boxes = []
            for _ in range(4):
                x, y = rng.integers(0, 90, 2)
                w, h = rng.integers(4, 30, 2)
                boxes.append(make_box(x, y, min(x + w, 128), min(y + h, 128)))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                tgt = regression_targets(boxes, 128, 128)
            heat = gaussian_heatmap(boxes, 128, 128).values
            assert np.array_equal(tgt.mask, heat == 1.0)


class TestMaster:
    def test_overwrite_rule(self):
        yp = Heatmap(np.array([[0.8, 0.8, 0.3]]))
        yn = Heatmap(np.array([[0.6, 0.0, 0.0]]))
        assert master_heatmap(yp, yn).values.tolist() == [[-0.6, 0.8, 0.3]]

    def test_zero_negatives_is_identity(self, rng):
        yp = Heatmap(rng.uniform(0, 1, (5, 6)))
        assert np.array_equal(master_heatmap(yp, Heatmap(np.zeros((5, 6)))).values, yp.values)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            master_heatmap(Heatmap(np.zeros((2, 2))), Heatmap(np.zeros((2, 3))))

    def test_distant_negative_leaves_positive_peak(self):
        yp = gaussian_heatmap([make_box(16, 16, 64, 64)], 256, 256)
        yn = gaussian_heatmap([make_box(160, 160, 208, 208)], 256, 256)
        y = master_heatmap(yp, yn).values
        assert y.max() == 1.0 and y.min() == -1.0
        assert np.array_equal(y[yn.values == 0], yp.values[yn.values == 0])


class TestKernelWindow:
    @pytest.mark.parametrize("side", [8, 48, 96])
    def test_support_ends_at_three_sigma(self, side):
        stride = 4
        g = gaussian_heatmap([make_box(0, 0, side, side)], 512, 512, stride).values
        sigma = max(side / (6 * stride), 1.0)
        c = side // (2 * stride)
        row = g[c]
        inside = [d for d in range(len(row) - c) if d <= 3 * sigma]
        assert all(row[c + d] > 0 for d in inside)
        assert all(row[c + d] == 0 for d in range(len(row) - c) if d > 3 * sigma)


class TestFocalLoss:
    def test_single_positive_cell(self):
        assert focal_loss(np.array([[0.5]]), np.array([[1.0]])) == pytest.approx(0.25 * math.log(2), rel=1e-12)
        assert focal_loss(np.array([[0.5]]), np.array([[1.0]])) == pytest.approx(0.173287, abs=1e-6)

    def test_perfect_prediction_tends_to_zero(self):
        y = np.array([[1.0, 0.0, 0.3]])
        losses = [focal_loss(np.where(y == 1, 1 - e, e), y) for e in (1e-2, 1e-4, 1e-6)]
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-10

    @pytest.mark.parametrize("p", [0.01, 0.2, 0.5, 0.77, 0.999])
    def test_hard_negative_ratio_is_sixteen(self, p):
        hard = focal_loss_cells(np.array([p]), np.array([-1.0]))[0]
        plain = focal_loss_cells(np.array([p]), np.array([0.0]))[0]
        assert hard / plain == 16.0

    def test_ratio_follows_beta(self):
        cfg = LossConfig(beta=3.0)
        hard, plain = focal_loss_cells(np.array([0.4, 0.4]), np.array([-1.0, 0.0]), cfg)
        assert hard / plain == 8.0

    def test_matches_direct_evaluation(self, rng):
        for _ in range(50):
            shape = tuple(rng.integers(1, 12, 2))
            y = random_target(rng, shape)
            yhat = rng.uniform(0, 1, shape)
            m = int(rng.integers(1, 6))
            ref = focal_by_hand(yhat, y, m=m)
            assert focal_loss(yhat, y, m=m) == pytest.approx(ref, rel=1e-12)

    def test_non_negative_and_monotone_on_positive_cell(self, rng):
        y = random_target(rng, (6, 6))
        y[2, 3] = 1.0
        yhat = rng.uniform(0.01, 0.99, (6, 6))
        prev = None
        for v in np.linspace(0.05, 0.95, 10):
            yhat[2, 3] = v
            loss = focal_loss(yhat, y)
            assert loss >= 0
            if prev is not None:
                assert loss < prev
            prev = loss

    def test_zero_objects_rejected(self):
        with pytest.raises(InputError):
            focal_loss(np.array([0.5]), np.array([1.0]), m=0)

    def test_nan_prediction_rejected(self):
        with pytest.raises(NumericError):
            focal_loss(np.array([math.nan]), np.array([0.0]))

    def test_gradient_matches_finite_differences(self, rng):
        h = 1e-5
        for _ in range(10):
            y = random_target(rng, (5, 7))
            yhat = rng.uniform(0.05, 0.95, (5, 7))
            m = int(rng.integers(1, 4))
            grad = focal_loss_grad(yhat, y, m=m)
            for idx in np.ndindex(yhat.shape):
                up, down = yhat.copy(), yhat.copy()
                up[idx] += h
                down[idx] -= h
                num = (focal_loss(up, y, m=m) - focal_loss(down, y, m=m)) / (2 * h)
                # summation round-off bounds what a difference quotient can resolve
                floor = 1e-15 * abs(focal_loss(yhat, y, m=m)) / h * 100
                assert grad[idx] == pytest.approx(num, rel=1e-4, abs=floor)


    @pytest.mark.parametrize("t", [1.0, 0.0, 0.4, 0.97, -0.3, -1.0])
    def test_cellwise_gradient_is_tight(self, t):
        h = 1e-6
        for p in np.linspace(0.02, 0.98, 25):
            grad = focal_loss_grad(np.array([p]), np.array([t]))[0]
            num = (focal_loss(np.array([p + h]), np.array([t])) - focal_loss(np.array([p - h]), np.array([t]))) / (2 * h)
            assert grad == pytest.approx(num, rel=1e-4)


class TestRegression:
    def test_aligned_box(self):
        t = regression_targets([make_box(0, 0, 16, 16)], 32, 32, 4)
        assert t.mask[2, 2] and t.mask.sum() == 1
        assert t.size[2, 2].tolist() == [16, 16] and t.offset[2, 2].tolist() == [0, 0]

    def test_sub_cell_offset(self):
        t = regression_targets([make_box(1, 1, 17, 17)], 32, 32, 4)
        assert t.mask[2, 2] and t.offset[2, 2].tolist() == [0.25, 0.25]

    def test_empty(self):
        t = regression_targets([], 32, 32, 4)
        assert not t.mask.any() and not t.size.any() and not t.offset.any()

    def test_collision_warns_and_keeps_last(self):
        with pytest.warns(UserWarning):
            t = regression_targets([make_box(0, 0, 16, 16), make_box(1, 1, 16, 16)], 32, 32, 4)
        assert t.size[2, 2].tolist() == [15, 15]


class TestGridExport:
    def test_round_trip(self, tmp_path, rng):
        values = rng.uniform(-1, 1, (3, 5))
        path, side = write_grid(tmp_path / "g.f32", values, {"volume_id": "v", "z": 4, "stride": 4})
        assert path.stat().st_size == 3 * 5 * 4
        arr, meta = read_grid(path)
        assert np.array_equal(arr, values.astype("<f4"))
        assert meta["shape"] == [3, 5] and meta["z"] == 4 and meta["byte_order"] == "little"

    def test_bytes_are_little_endian_row_major(self, tmp_path):
        path, _ = write_grid(tmp_path / "g.f32", np.array([[1.0, 2.0], [3.0, 4.0]]), {})
        assert np.frombuffer(path.read_bytes(), dtype="<f4").tolist() == [1, 2, 3, 4]
