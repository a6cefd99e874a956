import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anyshot.geometry import (
    DELTA_CLAMP,
    ScoredBox,
    apply_deltas,
    box_iou,
    encode_deltas,
    iou,
    nms,
    nms_indices,
    validate_box,
)


def _iou_oracle(a, b):
    """Plain-Python intersection over union."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@st.composite
def boxes(draw, lo=0.0, hi=1.0, min_size=1e-3):
    x1 = draw(st.floats(lo, hi - min_size))
    y1 = draw(st.floats(lo, hi - min_size))
    x2 = draw(st.floats(x1 + min_size, hi))
    y2 = draw(st.floats(y1 + min_size, hi))
    return np.array([x1, y1, x2, y2])


class TestIoU:
    def test_identity(self):
        b = [0.1, 0.2, 0.5, 0.9]
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0

    def test_hand_overlap(self):
        expected = _iou_oracle([0, 0, 2, 2], [1, 1, 3, 3])
        assert expected == pytest.approx(1 / 7, abs=1e-15)
        assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(expected, abs=1e-15)

    def test_pairwise_shape(self, rng):
        a = np.sort(rng.uniform(size=(5, 2, 2)), axis=1).transpose(0, 2, 1).reshape(5, 4)[:, [0, 2, 1, 3]]
        b = a[:3]
        assert box_iou(a, b).shape == (5, 3)

    def test_zero_union_is_zero(self):
        assert iou([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]) == 0.0

    @given(boxes(), boxes())
    def test_symmetry_and_range(self, a, b):
        ab, ba = iou(a, b), iou(b, a)
        assert ab == ba
        assert 0.0 <= ab <= 1.0
        assert iou(a, a) == 1.0

    @given(boxes(), boxes())
    def test_matches_oracle(self, a, b):
        assert iou(a, b) == pytest.approx(_iou_oracle(a, b), abs=1e-12)


class TestValidateBox:
    @pytest.mark.parametrize("bad", [[0, 0, 0, 1], [0.5, 0, 0.4, 1], [0, 0, 1, np.nan]])
    def test_rejects_degenerate(self, bad):
        with pytest.raises(ValueError):
            validate_box(bad)

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            validate_box([0, 0, 1])


class TestDeltas:
    def test_identity(self):
        b = [0.1, 0.2, 0.4, 0.8]
        np.testing.assert_array_equal(encode_deltas(b, b), np.zeros(4))

    def test_center_shift(self):
        # anchor centred (1,1) 2x2, target centred (2,1) 2x2
        np.testing.assert_allclose(encode_deltas([0, 0, 2, 2], [1, 0, 3, 2]), [0.5, 0, 0, 0], atol=1e-15)

    def test_double_width(self):
        d = encode_deltas([0, 0, 2, 2], [-1, 0, 3, 2])
        assert d[2] == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_array_equal(d[[0, 1, 3]], 0.0)

    def test_zero_delta_keeps_anchor(self):
        a = np.array([0.1, 0.2, 0.4, 0.8])
        np.testing.assert_allclose(apply_deltas(a, np.zeros(4)), a, atol=1e-15)

    def test_hand_apply(self):
        np.testing.assert_allclose(apply_deltas([0.4, 0.4, 0.6, 0.6], [0.5, 0, 0, 0]), [0.5, 0.4, 0.7, 0.6],
                                   atol=1e-15)

    def test_size_clamp(self):
        out = apply_deltas([0.4, 0.4, 0.6, 0.6], [0, 0, 50.0, -50.0], clip=False)
        w, h = out[2] - out[0], out[3] - out[1]
        assert w == pytest.approx(0.2 * math.exp(DELTA_CLAMP))
        assert h == pytest.approx(0.2 * math.exp(-DELTA_CLAMP))

    def test_clip_to_unit_square(self):
        out = apply_deltas([0.8, 0.8, 1.0, 1.0], [1.0, 1.0, 0.5, 0.5])
        assert out.min() >= 0.0 and out.max() <= 1.0

    @given(boxes(lo=0.2, hi=0.8, min_size=0.05), boxes(lo=0.2, hi=0.8, min_size=0.05))
    def test_round_trip(self, anchor, target):
        # sizes in [0.05, 0.6] keep the ratio inside [e^-4, e^4]
        back = apply_deltas(anchor, encode_deltas(anchor, target), clip=False)
        np.testing.assert_allclose(back, target, atol=1e-12)


class TestNMS:
    def test_single(self):
        d = [ScoredBox((0, 0, 1, 1), 0.5, 0)]
        assert nms(d, 0.5) == d

    def test_identical_boxes(self):
        a = ScoredBox((0, 0, 1, 1), 0.9, 0)
        b = ScoredBox((0, 0, 1, 1), 0.8, 0)
        assert nms([b, a], 0.5) == [a]

    def test_disjoint_kept(self):
        a = ScoredBox((0, 0, 0.2, 0.2), 0.9, 0)
        b = ScoredBox((0.5, 0.5, 0.7, 0.7), 0.8, 0)
        assert nms([a, b], 0.5) == [a, b]

    def test_per_class(self):
        a = ScoredBox((0, 0, 1, 1), 0.9, 0)
        b = ScoredBox((0, 0, 1, 1), 0.8, 1)
        assert nms([a, b], 0.5) == [a, b]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], 0.0)
        with pytest.raises(ValueError):
            nms_indices(np.zeros((1, 4)) + [0, 0, 1, 1], [0.5], [0], 1.5)

    def test_score_validation(self):
        with pytest.raises(ValueError):
            ScoredBox((0, 0, 1, 1), 1.5, 0)

    def test_ties_ignore_input_order(self):
        boxes_ = np.array([[0, 0, 0.5, 0.5], [0.1, 0, 0.6, 0.5], [0.6, 0.6, 0.9, 0.9]])
        scores = np.array([0.7, 0.7, 0.7])
        classes = np.array([0, 0, 0])
        keep = nms_indices(boxes_, scores, classes, 0.5)
        perm = np.array([2, 1, 0])
        keep_p = nms_indices(boxes_[perm], scores[perm], classes[perm], 0.5)
        np.testing.assert_array_equal(np.sort(perm[keep_p]), np.sort(keep))

    @given(st.lists(st.tuples(boxes(), st.floats(0, 1), st.integers(0, 2)), min_size=0, max_size=12),
           st.floats(0.05, 1.0))
    def test_properties(self, dets, thr):
        items = [ScoredBox(tuple(b), s, c) for b, s, c in dets]
        kept = nms(items, thr)
        assert all(k in items for k in kept)
        scores = [k.score for k in kept]
        assert scores == sorted(scores, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < thr
