import numpy as np
import pytest

from rlseq.core import FluenceGrid, LeafPair, MachineState, PlanSequence
from rlseq.errors import ContractError, DataError
from rlseq.normalize import (
    CropBox,
    crop_and_resize,
    detect_roi,
    make_crop,
    map_positions_back,
    merge_control_points,
    resample_row,
)


class TestDetectRoi:
    def test_single_cell(self):
        v = np.zeros((4, 5))
        v[2, 3] = 1.0
        assert detect_roi(v) == (2, 3, 3, 4)

    def test_fully_positive(self):
        assert detect_roi(np.ones((3, 4))) == (0, 3, 0, 4)

    def test_block(self):
        v = np.zeros((6, 10))
        v[1:5, 2:8] = 2.0
        assert detect_roi(v) == (1, 5, 2, 8)

    def test_all_zero_errors(self):
        with pytest.raises(DataError):
            detect_roi(np.zeros((3, 4)))


class TestMakeCrop:
    def test_inference_formulas(self):
        box = make_crop((0, 4, 20, 60), (4, 100), "inference")
        assert (box.y1, box.y2) == (10, 80)

    def test_degenerate_left(self, rng):
        box = make_crop((0, 2, 0, 6), (2, 8), "train", rng)
        assert box.y1 == 0

    def test_degenerate_right(self, rng):
        box = make_crop((0, 2, 2, 8), (2, 8), "train", rng)
        assert box.y2 == 8

    def test_train_sampling_ranges(self, rng):
        seen_y1, seen_y2 = set(), set()
        for _ in range(300):
            box = make_crop((0, 2, 3, 6), (2, 10), "train", rng)
            assert 0 <= box.y1 <= 3 and 6 <= box.y2 <= 10
            seen_y1.add(box.y1)
            seen_y2.add(box.y2)
        assert seen_y1 == {0, 1, 2, 3}
        assert seen_y2 == {6, 7, 8, 9, 10}

    def test_never_discards_positive_columns(self, rng):
        for _ in range(100):
            v = np.zeros((3, 12))
            lo = int(rng.integers(0, 10))
            hi = int(rng.integers(lo + 1, 13))
            v[1, lo:hi] = 1.0
            roi = detect_roi(v)
            for mode in ("inference", "train"):
                box = make_crop(roi, v.shape, mode, rng)
                assert box.y1 <= lo and box.y2 >= hi


class TestCropAndResize:
    def test_identity(self):
        v = np.arange(12, dtype=float).reshape(3, 4)
        box = CropBox(0, 3, 0, 4, (3, 4))
        np.testing.assert_array_equal(crop_and_resize(v, box, 4).values, v)

    def test_constant_preserved(self):
        v = np.full((2, 6), 3.5)
        box = CropBox(0, 2, 1, 5, (2, 6))
        np.testing.assert_allclose(crop_and_resize(v, box, 9).values, 3.5)

    def test_ramp_round_trip(self):
        ramp = np.linspace(0, 5, 8)[None, :].repeat(2, axis=0)
        up = resample_row(ramp[0], 21)
        back = resample_row(up, 8)
        np.testing.assert_allclose(back, ramp[0], atol=1e-6)


class TestMapPositionsBack:
    def test_identity_box(self):
        box = CropBox(0, 2, 0, 8, (2, 8))
        pos = np.array([[[1, 5], [0, 8]]], dtype=float)
        np.testing.assert_array_equal(map_positions_back(pos, box, 8), pos.astype(int))

    def test_affine_endpoints(self):
        box = CropBox(0, 1, 3, 9, (1, 12))
        pos = np.array([[[0, 16]]], dtype=float)
        out = map_positions_back(pos, box, 16)
        assert out[0, 0, 0] == 3 and out[0, 0, 1] == 9

    def test_affine_example(self):
        box = CropBox(0, 1, 10, 80, (1, 100))
        pos = np.array([[[32, 32]]], dtype=float)
        out = map_positions_back(pos, box, 64)
        # 32 * 70/64 + 10 = 45
        assert out[0, 0, 0] == 45 and out[0, 0, 1] == 45

    def test_rows_outside_crop_closed_at_midpoint(self):
        box = CropBox(1, 3, 2, 6, (4, 8))
        pos = np.zeros((2, 2, 2))
        out = map_positions_back(pos, box, 8)
        for k in range(2):
            for row in (0, 3):
                assert out[k, row, 0] == out[k, row, 1] == 4

    def test_monotone(self, rng):
        for _ in range(200):
            n_cols = int(rng.integers(4, 40))
            roi_hi = int(rng.integers(2, n_cols + 1))
            roi_lo = int(rng.integers(0, roi_hi - 1))
            box = CropBox(0, 1, roi_lo, roi_hi, (1, n_cols))
            columns = int(rng.integers(8, 65))
            p = np.sort(rng.uniform(0, columns, size=50))
            mapped_a = map_positions_back(
                np.stack([p, np.full(50, columns)], axis=1)[:, None, :], box, columns
            )[:, 0, 0]
            mapped_b = map_positions_back(
                np.stack([np.zeros(50), p], axis=1)[:, None, :], box, columns
            )[:, 0, 1]
            assert np.all(np.diff(mapped_a) >= 0)
            assert np.all(np.diff(mapped_b) >= 0)

    def test_round_trip_identity_on_integers(self, rng):
        n_cols = 16
        box = CropBox(0, 3, 0, n_cols, (3, n_cols))
        a = rng.integers(0, n_cols + 1, size=(5, 3))
        b = rng.integers(0, n_cols + 1, size=(5, 3))
        pos = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=2).astype(float)
        np.testing.assert_array_equal(map_positions_back(pos, box, n_cols), pos.astype(int))


def _plan_from_positions(positions, mus, shape):
    states = []
    for k, mu in enumerate(mus):
        pairs = tuple(LeafPair(int(a), int(b)) for a, b in positions[k])
        states.append(MachineState(pairs, mu))
    return PlanSequence(tuple(states), shape)


class TestMergeControlPoints:
    def test_formula_example(self):
        # positions 2 then 4 merge to 3
        plan = _plan_from_positions([[[2, 2]], [[4, 4]]], [1.0, 1.0], (1, 8))
        merged = merge_control_points(plan, 1)
        assert merged.states[0].pairs[0] == LeafPair(3, 3)
        assert merged.states[0].mu == 2.0

    def test_identity(self):
        plan = _plan_from_positions([[[1, 3]], [[2, 5]]], [1.0, 2.0], (1, 8))
        merged = merge_control_points(plan, 2)
        assert merged.states == plan.states

    def test_identical_cps_keep_positions_double_mu(self):
        plan = _plan_from_positions([[[1, 4]], [[1, 4]]], [0.7, 0.9], (1, 8))
        merged = merge_control_points(plan, 1)
        assert merged.states[0].pairs[0] == LeafPair(1, 4)
        assert merged.states[0].mu == pytest.approx(1.6)

    def test_half_integer_means_open_outward(self):
        plan = _plan_from_positions([[[1, 4]], [[2, 5]]], [1.0, 1.0], (1, 8))
        merged = merge_control_points(plan, 1)
        # means are 1.5 and 4.5: a rounds down, b rounds up
        assert merged.states[0].pairs[0] == LeafPair(1, 5)

    @pytest.mark.parametrize("k,k_target", [(8, 4), (8, 6), (5, 3), (7, 7), (9, 5)])
    def test_count_exact(self, rng, k, k_target):
        a, b = [], []
        positions = rng.integers(0, 5, size=(k, 2, 2))
        positions = np.sort(positions, axis=2)
        plan = _plan_from_positions(positions, list(rng.uniform(0.5, 2.5, k)), (2, 8))
        merged = merge_control_points(plan, k_target)
        assert merged.n_cp == k_target
        # total MU is preserved by pairwise sums
        assert merged.monitor_units().sum() == pytest.approx(plan.monitor_units().sum())

    def test_rejects_growth(self):
        plan = _plan_from_positions([[[0, 1]]], [1.0], (1, 4))
        with pytest.raises(ContractError):
            merge_control_points(plan, 2)

    def test_rejects_more_than_pairwise(self):
        positions = [[[0, 1]]] * 5
        plan = _plan_from_positions(positions, [1.0] * 5, (1, 4))
        with pytest.raises(ContractError):
            merge_control_points(plan, 2)  # ceil(5/2) == 3
