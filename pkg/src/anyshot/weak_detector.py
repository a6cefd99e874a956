"""OICR-style weak detector trained from image-level labels.

A WSDDN base (classification stream times detection stream) produces
proposal scores whose column sums are compared against image labels with
binary cross-entropy. ``R`` refinement heads, each with an extra
background column, are trained on pseudo-labels mined from the previous
stream. The mean of the refinement logits is the weak detector output.

Batched functions work on proposals from several images concatenated
along axis 0 (see :class:`Batch`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import box_iou
from .similarity import softmax

EPS = 1e-6
PSEUDO_IOU = 0.5


class EmptyImageError(ValueError):
    pass


@dataclass
class WeakDetectorParams:
    W_c: np.ndarray  # (d, C)
    b_c: np.ndarray
    W_d: np.ndarray  # (d, C)
    b_d: np.ndarray
    refine_W: list[np.ndarray]  # R x (d, C + 1), column 0 = background
    refine_b: list[np.ndarray]

    def __post_init__(self):
        if len(self.refine_W) < 1 or len(self.refine_W) != len(self.refine_b):
            raise ValueError("need at least one refinement head")
        for W in self.refine_W:
            if W.shape[1] != self.W_c.shape[1] + 1:
                raise ValueError("refinement heads need exactly one background column")

    @classmethod
    def initialize(cls, feature_dim: int, num_classes: int, num_refine: int = 3, rng=None, scale: float = 0.01):
        rng = np.random.default_rng(0) if rng is None else rng
        d, C = feature_dim, num_classes
        return cls(
            W_c=scale * rng.standard_normal((d, C)),
            b_c=np.zeros(C),
            W_d=scale * rng.standard_normal((d, C)),
            b_d=np.zeros(C),
            refine_W=[scale * rng.standard_normal((d, C + 1)) for _ in range(num_refine)],
            refine_b=[np.zeros(C + 1) for _ in range(num_refine)],
        )

    @property
    def num_refine(self) -> int:
        return len(self.refine_W)

    @property
    def num_classes(self) -> int:
        return self.W_c.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        out = {"weak.cls.W": self.W_c, "weak.cls.b": self.b_c, "weak.det.W": self.W_d, "weak.det.b": self.b_d}
        for r, (W, b) in enumerate(zip(self.refine_W, self.refine_b)):
            out[f"weak.refine{r}.W"] = W
            out[f"weak.refine{r}.b"] = b
        return out


@dataclass
class Batch:
    """Proposals of several images stacked along axis 0."""

    records: list
    features: np.ndarray  # (N, d)
    boxes: np.ndarray  # (N, 4)
    seg: np.ndarray  # (N,) image index of each proposal
    starts: np.ndarray  # (n,) first row of each image
    counts: np.ndarray  # (n,)
    labels: np.ndarray  # (n, C)
    known: np.ndarray  # (n, C) bool

    @property
    def num_images(self) -> int:
        return len(self.records)


def make_batch(records) -> Batch:
    if not records:
        raise ValueError("empty batch")
    for r in records:
        if r.num_proposals == 0:
            raise EmptyImageError(f"image {r.image_id} has no proposals")
    counts = np.array([r.num_proposals for r in records])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return Batch(
        records=list(records),
        features=np.concatenate([r.features for r in records]),
        boxes=np.concatenate([r.boxes for r in records]),
        seg=np.repeat(np.arange(len(records)), counts),
        starts=starts,
        counts=counts,
        labels=np.stack([r.labels for r in records]).astype(np.float64),
        known=np.stack([r.known_labels() for r in records]),
    )


def _segment_softmax(x, seg, starts):
    mx = np.maximum.reduceat(x, starts, axis=0)
    e = np.exp(x - mx[seg])
    return e / np.add.reduceat(e, starts, axis=0)[seg]


def _wsddn(Z, params, seg, starts):
    s_cls = softmax(Z @ params.W_c + params.b_c, axis=1)
    s_det = _segment_softmax(Z @ params.W_d + params.b_d, seg, starts)
    phi = s_cls * s_det
    return s_cls, s_det, phi, np.add.reduceat(phi, starts, axis=0)


def wsddn_forward(features, params: WeakDetectorParams):
    """WSDDN scores of one image.

    Returns:
        (P, C) proposal scores and (C,) image scores clamped to
        ``[EPS, 1 - EPS]``.
    """
    Z = np.asarray(features, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise EmptyImageError("image has no proposals")
    seg = np.zeros(len(Z), dtype=np.int64)
    _, _, phi, y = _wsddn(Z, params, seg, np.array([0]))
    return phi, np.clip(y[0], EPS, 1 - EPS)


def refine_logits(Z, params: WeakDetectorParams) -> list[np.ndarray]:
    return [Z @ W + b for W, b in zip(params.refine_W, params.refine_b)]


def mean_refine_logits(Z, params: WeakDetectorParams) -> np.ndarray:
    """(P, C + 1) averaged refinement logits, background in column 0."""
    return np.mean(refine_logits(Z, params), axis=0)


def weak_aggregate(features, params: WeakDetectorParams):
    """Averaged foreground logits and their class probabilities.

    Softmax over ``[background | classes]`` followed by renormalizing the
    foreground entries is the same as a softmax over the foreground logits
    alone, which is what is computed here.
    """
    mean = mean_refine_logits(np.asarray(features, dtype=np.float64), params)
    logits = mean[:, 1:]
    return logits, softmax(logits, axis=1)


@dataclass
class PseudoLabelSet:
    labels: np.ndarray  # (P,) 0 = background, c + 1 = class c
    weights: np.ndarray  # (P,)


def oicr_pseudo_labels(prev_scores, image_labels, boxes, known=None) -> PseudoLabelSet:
    """Mine refinement targets from the previous stream's scores.

    For each positive class the top-scoring proposal and every proposal
    overlapping it with IoU >= 0.5 take that class, weighted by the top
    score. Overlapping claims go to the higher weight, then to the lower
    class index. Everything else is background with weight 1.
    """
    prev = np.asarray(prev_scores, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    P, C = prev.shape
    labels = np.zeros(P, dtype=np.int64)
    weights = np.ones(P)
    claimed = np.full(P, -np.inf)
    positive = np.asarray(image_labels) > 0
    if known is not None:
        positive &= np.asarray(known, dtype=bool)
    for c in np.flatnonzero(positive):
        top = int(np.argmax(prev[:, c]))
        w = prev[top, c]
        members = box_iou(boxes[top], boxes)[0] >= PSEUDO_IOU
        members[top] = True
        # classes are visited in ascending order, so ties keep the lower index
        take = members & (w > claimed)
        labels[take] = c + 1
        weights[take] = w
        claimed[take] = w
    return PseudoLabelSet(labels, weights)


@dataclass
class WeakLossResult:
    mil: float
    refine: float
    grads: dict[str, np.ndarray]
    pseudo: list[list[PseudoLabelSet]]  # [stream][image]


def weak_loss_and_grad(batch: Batch, params: WeakDetectorParams, pseudo=None, need_grad: bool = True):
    """MIL + refinement losses and their analytic gradients.

    Pseudo-labels are constants for differentiation. Passing ``pseudo``
    reuses previously mined labels (used for finite-difference checks).
    """
    Z, seg, starts, n = batch.features, batch.seg, batch.starts, batch.num_images
    a, known = batch.labels, batch.known
    s_cls, s_det, phi, y = _wsddn(Z, params, seg, starts)
    yc = np.clip(y, EPS, 1 - EPS)
    mil = -np.sum(known * (a * np.log(yc) + (1 - a) * np.log(1 - yc))) / n

    grads = {}
    if need_grad:
        dy = known * (-a / yc + (1 - a) / (1 - yc)) / n
        dy = dy * ((y > EPS) & (y < 1 - EPS))
        dphi = dy[seg]
        ds_cls = dphi * s_det
        ds_det = dphi * s_cls
        dx_c = s_cls * (ds_cls - np.sum(ds_cls * s_cls, axis=1, keepdims=True))
        dx_d = s_det * (ds_det - np.add.reduceat(ds_det * s_det, starts, axis=0)[seg])
        grads["weak.cls.W"] = Z.T @ dx_c
        grads["weak.cls.b"] = dx_c.sum(axis=0)
        grads["weak.det.W"] = Z.T @ dx_d
        grads["weak.det.b"] = dx_d.sum(axis=0)

    prop_weight = 1.0 / (n * batch.counts[seg])
    prev = phi
    refine_total = 0.0
    mined = []
    for r, L in enumerate(refine_logits(Z, params)):
        if pseudo is None:
            stream = [
                oicr_pseudo_labels(
                    prev[s : s + c], batch.labels[i], batch.boxes[s : s + c], known[i]
                )
                for i, (s, c) in enumerate(zip(starts, batch.counts))
            ]
        else:
            stream = pseudo[r]
        mined.append(stream)
        lab = np.concatenate([p.labels for p in stream])
        w = np.concatenate([p.weights for p in stream]) * prop_weight
        probs = softmax(L, axis=1)
        rows = np.arange(len(lab))
        refine_total += -np.sum(w * np.log(probs[rows, lab]))
        if need_grad:
            dL = probs.copy()
            dL[rows, lab] -= 1.0
            dL *= w[:, None]
            grads[f"weak.refine{r}.W"] = Z.T @ dL
            grads[f"weak.refine{r}.b"] = dL.sum(axis=0)
        prev = probs[:, 1:]
    return WeakLossResult(float(mil), float(refine_total), grads, mined)


def weak_loss(records, params: WeakDetectorParams) -> float:
    """MIL plus refinement loss over a list of images."""
    res = weak_loss_and_grad(make_batch(records), params, need_grad=False)
    return res.mil + res.refine
