"""Detection and mask evaluation: greedy matching, all-point AP, mAP."""

from __future__ import annotations

import csv
import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import box_iou
from .transfer import TransferOptions, predict_image

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RASTER = 112
EVAL_SCORE_THRESHOLD = 0.01
MAX_DETS_PER_IMAGE = 100


@dataclass
class MatchResult:
    tp: np.ndarray  # (D,) bool, detections in score order
    gt_matched: np.ndarray  # (G,) bool


def paste_mask(mask, box, raster: int = RASTER) -> np.ndarray:
    """Nearest-neighbor paste of a 14x14 mask into its box on a unit-square raster.

    Probabilities are thresholded at 0.5 (inclusive).
    """
    mask = np.asarray(mask, dtype=np.float64) >= 0.5
    n = mask.shape[0]
    c = (np.arange(raster) + 0.5) / raster
    u = (c - box[0]) / (box[2] - box[0])
    v = (c - box[1]) / (box[3] - box[1])
    inside_u = (u >= 0) & (u < 1)
    inside_v = (v >= 0) & (v < 1)
    iu = np.clip(np.floor(u * n).astype(int), 0, n - 1)
    iv = np.clip(np.floor(v * n).astype(int), 0, n - 1)
    return mask[np.ix_(iv, iu)] & inside_v[:, None] & inside_u[None, :]


def binary_iou(a, b) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def mask_paste_iou(mask_a, box_a, mask_b, box_b, raster: int = RASTER) -> float:
    return binary_iou(paste_mask(mask_a, box_a, raster), paste_mask(mask_b, box_b, raster))


def match_detections(det_boxes, gt_boxes, iou_threshold: float, overlaps=None) -> MatchResult:
    """Greedy matching of score-sorted detections to ground truth.

    Each detection takes the unmatched ground truth with the highest
    overlap, provided it reaches ``iou_threshold``. ``overlaps`` may supply a
    precomputed (D, G) overlap matrix, e.g. mask IoU.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    D, G = len(det_boxes), len(gt_boxes)
    if overlaps is None:
        overlaps = box_iou(det_boxes, gt_boxes) if D and G else np.zeros((D, G))
    tp = np.zeros(D, dtype=bool)
    matched = np.zeros(G, dtype=bool)
    for i in range(D):
        if G == 0:
            break
        cand = np.where(matched, -1.0, overlaps[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[i] = True
            matched[j] = True
    return MatchResult(tp, matched)


def average_precision(flags, num_gt: int) -> float:
    """All-point interpolated AP of a score-ordered TP/FP sequence.

    Returns NaN when there is neither ground truth nor a detection
    (undefined, excluded from aggregates) and 0 when detections exist but
    ground truth does not.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return math.nan if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    # every TP adds 1/num_gt recall at the envelope precision; summing those
    # rationals exactly keeps the result correctly rounded
    tp = np.cumsum(flags).tolist()
    best_num, best_den = 0, 1
    total = Fraction(0)
    for i in range(len(tp) - 1, -1, -1):
        if tp[i] * best_den > best_num * (i + 1):
            best_num, best_den = tp[i], i + 1
        if flags[i]:
            total += Fraction(best_num, best_den)
    return float(total / num_gt)


@dataclass
class EvalReport:
    class_sets: dict[str, str]  # class name -> "base" | "novel"
    per_class: dict[str, dict[str, float]]
    per_threshold: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def metrics(self) -> list[str]:
        names = []
        for row in self.per_class.values():
            names.extend(m for m in row if m not in names)
        return names

    def aggregate(self, group: str, metric: str) -> float:
        """Unweighted mean over classes of ``group`` ("base", "novel", "all")."""
        vals = [
            row[metric]
            for name, row in self.per_class.items()
            if (group == "all" or self.class_sets[name] == group) and metric in row and not math.isnan(row[metric])
        ]
        return float(np.mean(vals)) if vals else math.nan

    def to_rows(self) -> list[tuple[str, str, str, float]]:
        rows = []
        for name, row in self.per_class.items():
            for metric, value in row.items():
                rows.append((name, self.class_sets[name], metric, 100.0 * value))
        # the set column only holds base/novel; the overall mean lives in the JSON
        for group in sorted(set(self.class_sets.values())):
            for metric in self.metrics():
                rows.append(("mean", group, metric, 100.0 * self.aggregate(group, metric)))
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "set", "metric", "value"])
            for name, group, metric, value in self.to_rows():
                writer.writerow([name, group, metric, repr(float(value))])

    def to_json(self) -> dict:
        return {
            "per_class": self.per_class,
            "class_sets": self.class_sets,
            "per_threshold": self.per_threshold,
            "aggregates": {
                group: {m: self.aggregate(group, m) for m in self.metrics()}
                for group in sorted(set(self.class_sets.values())) + ["all"]
            },
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _ap_over_thresholds(pooled, gts_by_image, thresholds, mask_mode: bool):
    """APs at each threshold for one class.

    ``pooled``: list of (score, image_id, det_index, box, pasted_mask).
    ``gts_by_image``: image_id -> (gt_boxes, pasted_gt_masks).
    """
    num_gt = sum(len(b) for b, _ in gts_by_image.values())
    pooled = sorted(pooled, key=lambda d: (-d[0], d[1], d[2]))
    by_image: dict[int, list[int]] = {}
    for pos, det in enumerate(pooled):
        by_image.setdefault(det[1], []).append(pos)
    overlaps = {}
    for image_id, positions in by_image.items():
        gt_boxes, gt_masks = gts_by_image.get(image_id, (np.zeros((0, 4)), []))
        if mask_mode:
            ov = np.array([[binary_iou(pooled[p][4], gm) for gm in gt_masks] for p in positions])
        else:
            ov = box_iou(np.array([pooled[p][3] for p in positions]), gt_boxes)
        overlaps[image_id] = ov.reshape(len(positions), len(gt_boxes))
    aps = []
    for t in thresholds:
        flags = np.zeros(len(pooled), dtype=bool)
        for image_id, positions in by_image.items():
            gt_boxes = gts_by_image.get(image_id, (np.zeros((0, 4)), []))[0]
            res = match_detections(np.zeros((len(positions), 4)), gt_boxes, t, overlaps[image_id])
            flags[positions] = res.tp
        aps.append(average_precision(flags, num_gt))
    return aps


def evaluate_detections(detections_by_image, records, split, classes, segment: bool, thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Score precomputed detections (``image_id -> list[Detection]``)."""
    if not records:
        raise ValueError("cannot evaluate on an empty test set")
    class_sets = {split.classes[c]: ("novel" if split.is_novel(c) else "base") for c in classes}
    per_class: dict[str, dict[str, float]] = {}
    per_threshold: dict[str, dict[str, list[float]]] = {}
    for c in classes:
        name = split.classes[c]
        gts = {}
        for r in records:
            anns = [a for a in r.annotations if a.class_id == c]
            if anns:
                boxes = np.array([a.box for a in anns])
                masks = [paste_mask(a.mask, a.box) for a in anns] if segment else []
                gts[r.image_id] = (boxes, masks)
        pooled = []
        for r in records:
            for i, det in enumerate(detections_by_image.get(r.image_id, [])):
                if det.class_id == c:
                    pm = paste_mask(det.mask, det.box) if segment and det.mask is not None else None
                    pooled.append((det.score, r.image_id, i, np.asarray(det.box), pm))
        aps = _ap_over_thresholds(pooled, gts, thresholds, mask_mode=False)
        row = {"AP50": aps[0], "mAP": _nanmean(aps)}
        per_threshold[name] = {"box": aps}
        if segment:
            maps = _ap_over_thresholds(pooled, gts, thresholds, mask_mode=True)
            row["maskAP50"] = maps[0]
            row["maskmAP"] = _nanmean(maps)
            per_threshold[name]["mask"] = maps
        per_class[name] = row
    return EvalReport(class_sets, per_class, per_threshold)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def predict_all(model, records, mode: str, options: TransferOptions | None = None, joint_softmax: bool = True,
                score_threshold: float = EVAL_SCORE_THRESHOLD, nms_threshold: float = 0.5):
    out = {}
    for r in records:
        dets = predict_image(r, model, mode, score_threshold, nms_threshold, options, joint_softmax)
        out[r.image_id] = dets[:MAX_DETS_PER_IMAGE]
    return out


def evaluate_model(
    model,
    records,
    scope: str = "all",
    segment: bool | None = None,
    options: TransferOptions | None = None,
    joint_softmax: bool = True,
    thresholds=IOU_THRESHOLDS,
) -> EvalReport:
    """Predict on every record and evaluate the classes of ``scope``."""
    if not records:
        raise ValueError("cannot evaluate on an empty test set")
    split = model.split
    segment = model.segment if segment is None else (segment and model.segment)
    classes = {"base": split.base_ids, "novel": split.novel_ids, "all": np.arange(split.num_classes)}[scope]
    dets = predict_all(model, records, scope, options, joint_softmax)
    return evaluate_detections(dets, records, split, classes, segment, thresholds)
