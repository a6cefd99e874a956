"""Axis-aligned boxes in the unit square.

Boxes are ``(x1, y1, x2, y2)`` arrays with arbitrary leading dimensions.
Deltas use the usual R-CNN parametrization ``(tx, ty, tw, th)``: center
offsets normalized by the anchor size and log size ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DELTA_CLAMP = 4.0
DEFAULT_NMS_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredBox:
    box: tuple[float, float, float, float]
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def validate_box(box) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    if box.shape[-1] != 4:
        raise ValueError(f"boxes need 4 coordinates, got shape {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ValueError("box coordinates must be finite")
    if np.any(box[..., 2] <= box[..., 0]) or np.any(box[..., 3] <= box[..., 1]):
        raise ValueError("boxes need x2 > x1 and y2 > y1")
    return box


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    w = np.clip(boxes[..., 2] - boxes[..., 0], 0.0, None)
    h = np.clip(boxes[..., 3] - boxes[..., 1], 0.0, None)
    return w * h


def box_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU.

    Args:
        boxes1: (N, 4) boxes.
        boxes2: (M, 4) boxes.

    Returns:
        (N, M) matrix of IoU values. Pairs with zero union give 0.
    """
    a = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def iou(a, b) -> float:
    """IoU of two single boxes."""
    return float(box_iou(a, b)[0, 0])


def _center_size(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_deltas(anchor, target) -> np.ndarray:
    """Regression target that moves ``anchor`` onto ``target``."""
    anchor = np.asarray(anchor, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchor)
    tcx, tcy, tw, th = _center_size(target)
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)],
        axis=-1,
    )


def apply_deltas(anchor, deltas, clip: bool = True) -> np.ndarray:
    """Decode ``deltas`` against ``anchor``.

    Size deltas are clamped to ``DELTA_CLAMP`` before exponentiation so an
    untrained regressor cannot overflow. With ``clip`` the result is
    clipped to the unit square.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchor)
    tw = np.clip(deltas[..., 2], -DELTA_CLAMP, DELTA_CLAMP)
    th = np.clip(deltas[..., 3], -DELTA_CLAMP, DELTA_CLAMP)
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def nms_indices(boxes, scores, class_ids, iou_threshold: float = DEFAULT_NMS_THRESHOLD) -> np.ndarray:
    """Greedy per-class NMS returning kept indices in kept order.

    Ordering is score descending, then class id ascending, then box
    coordinates lexicographically, so ties never depend on input order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    class_ids = np.asarray(class_ids).reshape(-1)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], class_ids, -scores))
    overlaps = box_iou(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    kept: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        suppressed |= (class_ids == class_ids[i]) & (overlaps[i] >= iou_threshold)
    return np.asarray(kept, dtype=np.int64)


def nms(dets: list[ScoredBox], iou_threshold: float = DEFAULT_NMS_THRESHOLD) -> list[ScoredBox]:
    if not dets:
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
        return []
    keep = nms_indices(
        [d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets], iou_threshold
    )
    return [dets[i] for i in keep]


def box_to_json(box) -> list[float]:
    # float() of a numpy scalar serializes with round-trip (17 digit) precision
    return [float(v) for v in np.asarray(box, dtype=np.float64)]
