import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anyshot.synthworld import ImageRecord
from anyshot.weak_detector import (
    EPS,
    EmptyImageError,
    WeakDetectorParams,
    make_batch,
    oicr_pseudo_labels,
    weak_aggregate,
    weak_loss,
    weak_loss_and_grad,
    wsddn_forward,
)


def _zero_params(d, C, R=1):
    return WeakDetectorParams(
        W_c=np.zeros((d, C)), b_c=np.zeros(C), W_d=np.zeros((d, C)), b_d=np.zeros(C),
        refine_W=[np.zeros((d, C + 1)) for _ in range(R)], refine_b=[np.zeros(C + 1) for _ in range(R)],
    )


def _record(rng, P=6, d=5, C=3, labels=None, image_id=0):
    lo = rng.uniform(0, 0.6, size=(P, 2))
    boxes = np.hstack([lo, lo + rng.uniform(0.1, 0.4, size=(P, 2))])
    if labels is None:
        labels = (rng.uniform(size=C) < 0.5).astype(np.int64)
    return ImageRecord(image_id, boxes, rng.normal(size=(P, d)), np.asarray(labels))


class TestParams:
    def test_background_column_required(self):
        p = _zero_params(2, 3)
        with pytest.raises(ValueError):
            WeakDetectorParams(p.W_c, p.b_c, p.W_d, p.b_d, [np.zeros((2, 3))], [np.zeros(3)])

    def test_needs_a_head(self):
        p = _zero_params(2, 3)
        with pytest.raises(ValueError):
            WeakDetectorParams(p.W_c, p.b_c, p.W_d, p.b_d, [], [])


class TestWSDDN:
    def test_single_proposal(self, rng):
        p = WeakDetectorParams.initialize(4, 3, rng=rng, scale=1.0)
        z = rng.normal(size=(1, 4))
        logits = z @ p.W_c + p.b_c
        expected = np.exp(logits[0]) / np.exp(logits[0]).sum()
        _, img = wsddn_forward(z, p)
        np.testing.assert_allclose(img, expected, atol=1e-15)

    def test_zero_weights(self):
        _, img = wsddn_forward(np.ones((1, 3)), _zero_params(3, 4))
        np.testing.assert_allclose(img, 0.25, atol=1e-15)

    def test_hand_two_proposals(self):
        p = _zero_params(1, 2)
        p.W_c[0] = [math.log(3), 0.0]
        p.W_d[0] = [math.log(3), 0.0]
        # both proposals share logits (ln 3, 0) in each stream
        cls = [3 / (3 + 1), 1 / (3 + 1)]
        det = [1 / 2, 1 / 2]
        phi, img = wsddn_forward(np.ones((2, 1)), p)
        np.testing.assert_allclose(phi, [[cls[0] * det[0], cls[1] * det[1]]] * 2, atol=1e-15)
        np.testing.assert_allclose(img, [0.75, 0.25], atol=1e-15)

    def test_clamped(self):
        p = _zero_params(1, 2)
        p.W_c[0] = [60.0, -60.0]
        _, img = wsddn_forward(np.ones((1, 1)), p)
        np.testing.assert_array_equal(img, [1 - EPS, EPS])

    def test_empty_image(self):
        with pytest.raises(EmptyImageError):
            wsddn_forward(np.zeros((0, 3)), _zero_params(3, 2))


class TestAggregate:
    def test_single_head(self, rng):
        p = WeakDetectorParams.initialize(4, 3, num_refine=1, rng=rng, scale=1.0)
        z = rng.normal(size=(5, 4))
        logits, _ = weak_aggregate(z, p)
        np.testing.assert_array_equal(logits, (z @ p.refine_W[0] + p.refine_b[0])[:, 1:])

    def test_identical_heads(self, rng):
        W = rng.normal(size=(4, 4))
        p = _zero_params(4, 3, R=2)
        p.refine_W[0][:] = W
        p.refine_W[1][:] = W
        z = rng.normal(size=(3, 4))
        np.testing.assert_allclose(weak_aggregate(z, p)[0], (z @ W)[:, 1:], atol=1e-14)

    def test_hand_mean(self):
        p = _zero_params(1, 2, R=2)
        p.refine_W[0][0] = [0.0, 0.0, math.log(4)]
        p.refine_W[1][0] = [0.0, math.log(4), 0.0]
        logits, probs = weak_aggregate(np.ones((1, 1)), p)
        np.testing.assert_allclose(logits, [[math.log(2), math.log(2)]], atol=1e-15)
        np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-15)

    def test_rows_stochastic(self, rng):
        p = WeakDetectorParams.initialize(6, 5, rng=rng, scale=3.0)
        _, probs = weak_aggregate(rng.normal(size=(50, 6)), p)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


class TestPseudoLabels:
    def test_single_proposal(self):
        ps = oicr_pseudo_labels([[0.2, 0.7]], [0, 1], [[0, 0, 1, 1]])
        assert ps.labels.tolist() == [2]
        assert ps.weights.tolist() == [0.7]

    def test_disjoint_is_background(self):
        ps = oicr_pseudo_labels([[0.9], [0.1]], [1], [[0, 0, 0.2, 0.2], [0.5, 0.5, 0.9, 0.9]])
        assert ps.labels.tolist() == [1, 0]
        assert ps.weights.tolist() == [0.9, 1.0]

    def test_overlap_inherits(self):
        # widths 1.0 and 0.6 along x, same y range: IoU = 0.6
        top, other = [0, 0, 1, 1], [0, 0, 0.6, 1]
        ps = oicr_pseudo_labels([[0.9], [0.1]], [1], [top, other])
        assert ps.labels.tolist() == [1, 1]
        assert ps.weights.tolist() == [0.9, 0.9]

    def test_no_labels(self):
        ps = oicr_pseudo_labels(np.full((3, 2), 0.5), [0, 0], np.tile([0, 0, 1, 1], (3, 1)))
        assert ps.labels.tolist() == [0, 0, 0]
        np.testing.assert_array_equal(ps.weights, 1.0)

    def test_conflict_prefers_higher_weight(self):
        boxes = [[0, 0, 1, 1], [0, 0, 1, 0.9]]
        ps = oicr_pseudo_labels([[0.3, 0.1], [0.2, 0.8]], [1, 1], boxes)
        assert ps.labels.tolist() == [2, 2]

    def test_conflict_tie_lower_class(self):
        boxes = [[0, 0, 1, 1], [0, 0, 1, 0.9]]
        ps = oicr_pseudo_labels([[0.5, 0.1], [0.2, 0.5]], [1, 1], boxes)
        assert ps.labels.tolist() == [1, 1]

    @given(st.integers(0, 2**31 - 1))
    def test_properties(self, seed):
        rng = np.random.default_rng(seed)
        r = _record(rng, P=8, C=4)
        scores = rng.uniform(size=(8, 4))
        ps = oicr_pseudo_labels(scores, r.labels, r.boxes)
        assert np.all((ps.weights >= 0) & (ps.weights <= 1))
        for c in np.flatnonzero(r.labels):
            assert np.any(ps.labels == c + 1) or np.any(
                (ps.labels > 0) & (ps.weights >= scores[:, c].max())
            )


class TestWeakLoss:
    def test_mil_single_class(self):
        r = ImageRecord(0, np.array([[0, 0, 1, 1.0]]), np.ones((1, 1)), np.array([1, 0]),
                        label_mask=np.array([True, False]))
        res = weak_loss_and_grad(make_batch([r]), _zero_params(1, 2), need_grad=False)
        assert res.mil == pytest.approx(-math.log(0.5), abs=1e-15)
        assert res.mil == pytest.approx(0.6931, abs=1e-4)

    def test_mil_perfect(self):
        p = _zero_params(1, 2)
        p.W_c[0] = [60.0, -60.0]
        r = ImageRecord(0, np.array([[0, 0, 1, 1.0]]), np.ones((1, 1)), np.array([1, 0]))
        res = weak_loss_and_grad(make_batch([r]), p, need_grad=False)
        assert res.mil <= 2 * math.log(1 / (1 - EPS)) + 1e-12

    def test_mil_negative_perfect(self):
        p = _zero_params(1, 3)
        p.W_c[0] = [-60.0, -60.0, 80.0]
        r = ImageRecord(0, np.array([[0, 0, 1, 1.0]]), np.ones((1, 1)), np.array([0, 0, 1]),
                        label_mask=np.array([True, True, False]))
        res = weak_loss_and_grad(make_batch([r]), p, need_grad=False)
        assert res.mil < 1e-5

    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p = WeakDetectorParams.initialize(5, 3, rng=rng, scale=1.0)
        r = _record(rng)
        perm = rng.permutation(r.num_proposals)
        shuffled = ImageRecord(0, r.boxes[perm], r.features[perm], r.labels)
        a, b = weak_loss([r], p), weak_loss([shuffled], p)
        assert a >= 0
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        p = WeakDetectorParams.initialize(4, 3, num_refine=2, rng=rng, scale=0.5)
        batch = make_batch([_record(rng, d=4, image_id=i) for i in range(3)])
        base = weak_loss_and_grad(batch, p)
        blocks = {"weak.cls.W": p.W_c, "weak.det.b": p.b_d, "weak.refine1.W": p.refine_W[1],
                  "weak.refine0.b": p.refine_b[0]}
        h = 1e-6
        for name, arr in blocks.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = weak_loss_and_grad(batch, p, pseudo=base.pseudo, need_grad=False)
                arr[idx] = old - h
                dn = weak_loss_and_grad(batch, p, pseudo=base.pseudo, need_grad=False)
                arr[idx] = old
                fd = ((up.mil + up.refine) - (dn.mil + dn.refine)) / (2 * h)
                g = base.grads[name][idx]
                assert abs(g - fd) / max(1.0, abs(g), abs(fd)) < 1e-5, (name, idx)
