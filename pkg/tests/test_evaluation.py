import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anyshot.evaluation import (
    IOU_THRESHOLDS,
    RASTER,
    EvalReport,
    average_precision,
    evaluate_detections,
    evaluate_model,
    mask_paste_iou,
    match_detections,
    paste_mask,
)
from anyshot.experiments import train_base
from anyshot.training import TrainConfig
from anyshot.transfer import Detection

FULL = np.ones((14, 14))


def brute_force_ap(flags, num_gt):
    """Enumerate PR points, take the precision envelope at each, integrate over recall."""
    if num_gt == 0:
        return math.nan if not flags else 0.0
    points = []
    tp = fp = 0
    for f in flags:
        tp += f
        fp += not f
        points.append((tp / num_gt, tp / (tp + fp)))
    area, prev_r = 0.0, 0.0
    for i, (r, _) in enumerate(points):
        env = max(p for _, p in points[i:])
        area += (r - prev_r) * env
        prev_r = r
    return area


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([True, True], 2) == 1.0

    def test_all_fp(self):
        assert average_precision([False, False], 2) == 0.0

    def test_hand_case(self):
        assert brute_force_ap([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-15)
        assert average_precision([True, False, True], 2) == 5 / 6

    def test_no_gt(self):
        assert math.isnan(average_precision([], 0))
        assert average_precision([False], 0) == 0.0
        assert average_precision([], 3) == 0.0

    def test_negative_gt(self):
        with pytest.raises(ValueError):
            average_precision([], -1)

    def test_random_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(0, 21))
            flags = list(rng.uniform(size=n) < 0.5)
            num_gt = int(sum(flags)) + int(rng.integers(0, 4))
            a, b = average_precision(flags, num_gt), brute_force_ap(flags, num_gt)
            if math.isnan(b):
                assert math.isnan(a)
            else:
                assert abs(a - b) <= 1e-12

    @given(st.lists(st.booleans(), max_size=20), st.integers(0, 5))
    def test_monotone(self, flags, extra):
        num_gt = sum(flags) + extra
        if num_gt == 0:
            return
        base = average_precision(flags, num_gt)
        assert average_precision(flags + [False], num_gt) <= base + 1e-15
        for i, f in enumerate(flags):
            if not f:
                flipped = flags[:i] + [True] + flags[i + 1 :]
                assert average_precision(flipped, num_gt + 1) >= average_precision(flags, num_gt + 1) - 1e-15


class TestMatching:
    def test_identical(self):
        assert match_detections([[0, 0, 1, 1]], [[0, 0, 1, 1]], 0.5).tp.tolist() == [True]

    def test_duplicate(self):
        res = match_detections([[0, 0, 1, 1], [0, 0, 1, 1]], [[0, 0, 1, 1]], 0.5)
        assert res.tp.tolist() == [True, False]
        assert res.gt_matched.tolist() == [True]

    def test_below_threshold(self):
        # intersection 0.45, union 1.0
        det, gt = [0, 0, 0.45, 1.0], [0, 0, 1.0, 1.0]
        res = match_detections([det], [gt], 0.5)
        assert res.tp.tolist() == [False]
        assert match_detections([det], [gt], 0.45).tp.tolist() == [True]

    def test_prefers_best_unmatched(self):
        gts = [[0, 0, 1, 1], [0, 0, 0.9, 1]]
        res = match_detections([[0, 0, 0.9, 1], [0, 0, 1, 1]], gts, 0.5)
        assert res.tp.tolist() == [True, True]

    def test_empty(self):
        assert match_detections(np.zeros((0, 4)), [[0, 0, 1, 1]], 0.5).tp.size == 0
        assert match_detections([[0, 0, 1, 1]], np.zeros((0, 4)), 0.5).tp.tolist() == [False]


class TestMaskIoU:
    def test_identical(self):
        m = np.zeros((14, 14))
        m[2:9, 4:12] = 0.8
        assert mask_paste_iou(m, [0.1, 0.2, 0.7, 0.9], m, [0.1, 0.2, 0.7, 0.9]) == 1.0

    def test_disjoint(self):
        assert mask_paste_iou(FULL, [0, 0, 0.3, 0.3], FULL, [0.5, 0.5, 0.9, 0.9]) == 0.0

    def test_hand_geometry(self):
        # both boxes align to the 112 grid (multiples of 16 cells), so pasting equals box IoU
        s = 1 / 7
        got = mask_paste_iou(FULL, [0, 0, 2 * s, 2 * s], FULL, [s, s, 3 * s, 3 * s])
        assert got == pytest.approx(1 / 7, abs=1e-12)

    def test_threshold_inclusive(self):
        assert paste_mask(np.full((14, 14), 0.5), [0, 0, 1, 1]).all()
        assert not paste_mask(np.full((14, 14), 0.49), [0, 0, 1, 1]).any()

    def test_block_replication(self):
        m = np.zeros((14, 14), dtype=bool)
        m[0, 0] = True
        pasted = paste_mask(m, [0, 0, 1, 1])
        assert pasted.shape == (RASTER, RASTER)
        assert pasted[:8, :8].all() and pasted.sum() == 64


class TestReport:
    def test_aggregate_skips_nan(self):
        rep = EvalReport({"a": "base", "b": "base", "n": "novel"},
                         {"a": {"AP50": 0.5}, "b": {"AP50": math.nan}, "n": {"AP50": 1.0}})
        assert rep.aggregate("base", "AP50") == 0.5
        assert rep.aggregate("all", "AP50") == 0.75

    def test_csv(self, tmp_path):
        rep = EvalReport({"a": "base"}, {"a": {"AP50": 0.25, "mAP": 0.1}})
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "class,set,metric,value"
        assert lines[1] == "a,base,AP50,25.0"


def _oracle_dets(records, score=1.0):
    return {
        r.image_id: [Detection("", score, a.box, a.mask.astype(float), a.class_id) for a in r.annotations]
        for r in records
    }


class TestEvaluate:
    def test_oracle_detections(self, small_world):
        split = small_world.split
        rep = evaluate_detections(_oracle_dets(small_world.test), small_world.test, split,
                                  np.arange(split.num_classes), segment=True)
        for name, row in rep.per_class.items():
            if not math.isnan(row["AP50"]):
                assert row["AP50"] == 1.0 and row["maskAP50"] == 1.0 and row["mAP"] == 1.0

    def test_no_predictions(self, small_world):
        split = small_world.split
        rep = evaluate_detections({}, small_world.test, split, np.arange(split.num_classes), segment=False)
        present = {a.class_id for r in small_world.test for a in r.annotations}
        for c in present:
            assert rep.per_class[split.classes[c]]["AP50"] == 0.0

    def test_map_is_mean_of_thresholds(self, small_world):
        model, _ = train_base(small_world, TrainConfig(base_iterations=20))
        rep = evaluate_model(model, small_world.test, "all")
        for name, row in rep.per_class.items():
            aps = [a for a in rep.per_threshold[name]["box"] if not math.isnan(a)]
            if aps:
                assert row["mAP"] == pytest.approx(np.mean(aps), abs=1e-12)
        assert len(IOU_THRESHOLDS) == 10

    def test_empty_test_set(self, small_world):
        model, _ = train_base(small_world, TrainConfig(base_iterations=0))
        with pytest.raises(ValueError):
            evaluate_model(model, [], "all")

    def test_deterministic(self, small_world):
        reps = [evaluate_model(train_base(small_world, TrainConfig(base_iterations=20, seed=3))[0],
                               small_world.test).to_json() for _ in range(2)]
        assert reps[0] == reps[1]
