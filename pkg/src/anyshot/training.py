"""Two-phase optimization with analytic gradients.

Base training minimizes ``rcnn + alpha * weak`` over the weak detector and
the base heads. Fine-tuning minimizes the R-CNN loss over the three
novel direct-adaptation heads only. Gradients are computed by hand and
checked against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import box_iou, encode_deltas
from .model import AnyShotModel
from .synthworld import MASK_SIZE, ImageRecord, count_novel_instances
from .transfer import DIRECT_BLOCKS, MASK_CELLS, TransferOptions, heads_backward
from .similarity import softmax
from .weak_detector import make_batch, weak_loss_and_grad

log = logging.getLogger(__name__)

BASE_PHASE = "base"
FINETUNE_PHASE = "finetune"


@dataclass
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 0.01
    finetune_learning_rate: float | None = 0.003
    momentum: float = 0.9
    base_iterations: int = 2000
    finetune_iterations_per_shot: int = 50
    batch_size: int = 4
    seed: int = 0
    k: int = 0
    fg_iou_threshold: float = 0.5
    segment: bool = True
    stop_gradient_weak: bool = False
    lr_decay_points: tuple[float, ...] = (0.6, 0.8)
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        problems = []
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        if self.k < 0:
            problems.append("k must be >= 0")
        if self.base_iterations < 0 or self.finetune_iterations_per_shot < 0:
            problems.append("iteration counts must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 < self.fg_iou_threshold <= 1:
            problems.append("fg_iou_threshold must lie in (0, 1]")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        self.lr_decay_points = tuple(self.lr_decay_points)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**obj)


@dataclass
class TargetAssignment:
    labels: np.ndarray  # (P,) 0 = background, c + 1 = class c
    matched: np.ndarray  # (P,) matched annotation index, -1 for background
    reg_targets: np.ndarray  # (P, 4), zero rows for background
    mask_targets: np.ndarray  # (P, 196), zero rows for background

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class LossReport:
    total: float
    rcnn_cls: float
    rcnn_reg: float
    rcnn_mask: float
    weak_mil: float
    weak_refine: float

    @property
    def rcnn(self) -> float:
        return self.rcnn_cls + self.rcnn_reg + self.rcnn_mask

    @property
    def weak(self) -> float:
        return self.weak_mil + self.weak_refine

    def row(self) -> list[float]:
        return [self.total, self.rcnn_cls, self.rcnn_reg, self.rcnn_mask, self.weak_mil, self.weak_refine]


TRACE_COLUMNS = ["iteration", "total", "rcnn_cls", "rcnn_reg", "rcnn_mask", "weak_mil", "weak_refine"]


def write_loss_trace(path, trace: list[LossReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for i, rep in enumerate(trace):
            writer.writerow([i, *(repr(float(v)) for v in rep.row())])


# --- targets -------------------------------------------------------------------------


def paste_mask_into(mask, src_box, dst_box, size: int = MASK_SIZE) -> np.ndarray:
    """Resample a box-relative binary mask into another box's grid (nearest cell)."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    c = (np.arange(size) + 0.5) / size
    xs = dst_box[0] + c * (dst_box[2] - dst_box[0])
    ys = dst_box[1] + c * (dst_box[3] - dst_box[1])
    u = (xs - src_box[0]) / (src_box[2] - src_box[0])
    v = (ys - src_box[1]) / (src_box[3] - src_box[1])
    inside_u = (u >= 0) & (u < 1)
    inside_v = (v >= 0) & (v < 1)
    iu = np.clip((u * n).astype(int), 0, n - 1)
    iv = np.clip((v * n).astype(int), 0, n - 1)
    out = mask[np.ix_(iv, iu)]
    return out & inside_v[:, None] & inside_u[None, :]


def assign_targets(record: ImageRecord, classes_in_scope, fg_iou_threshold: float = 0.5) -> TargetAssignment:
    """Label each proposal with its best-overlapping in-scope annotation.

    A proposal is foreground iff that IoU is at least ``fg_iou_threshold``.
    """
    P = record.num_proposals
    if P == 0:
        raise ValueError(f"image {record.image_id} has no proposals")
    scope = set(int(c) for c in classes_in_scope)
    gts = [i for i, a in enumerate(record.annotations) if a.class_id in scope]
    labels = np.zeros(P, dtype=np.int64)
    matched = np.full(P, -1, dtype=np.int64)
    reg = np.zeros((P, 4))
    masks = np.zeros((P, MASK_CELLS))
    if not gts:
        return TargetAssignment(labels, matched, reg, masks)
    gt_boxes = np.array([record.annotations[i].box for i in gts])
    overlaps = box_iou(record.boxes, gt_boxes)
    best = overlaps.argmax(axis=1)
    fg = overlaps[np.arange(P), best] >= fg_iou_threshold
    for p in np.flatnonzero(fg):
        ann = record.annotations[gts[best[p]]]
        labels[p] = ann.class_id + 1
        matched[p] = gts[best[p]]
        reg[p] = encode_deltas(record.boxes[p], ann.box)
        masks[p] = paste_mask_into(ann.mask, ann.box, record.boxes[p]).reshape(-1)
    return TargetAssignment(labels, matched, reg, masks)


# --- losses --------------------------------------------------------------------------


def phase_options(phase: str) -> TransferOptions:
    if phase == BASE_PHASE:
        # novel columns are outside the base-phase loss, so skip computing them
        return TransferOptions(similarity="none", cls=False, reg=False, seg=False, include_direct=False)
    if phase == FINETUNE_PHASE:
        return TransferOptions(include_direct=True)
    raise ValueError(f"unknown phase {phase!r}")


def trainable_blocks(model: AnyShotModel, phase: str) -> list[str]:
    names = list(model.blocks())
    if phase == BASE_PHASE:
        return [n for n in names if n.startswith(("weak.", "base_cls.", "base_reg.", "base_seg."))]
    if phase == FINETUNE_PHASE:
        return [n for n in names if n in DIRECT_BLOCKS]
    raise ValueError(f"unknown phase {phase!r}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rcnn_loss(out, batch, assignments, num_base: int, phase: str, segment: bool):
    """R-CNN classification, box and mask losses and output gradients.

    Classification uses a softmax over the columns active in ``phase``:
    ``[background | base]`` during base training, every class during
    fine-tuning. Each term averages over an image's proposals (foreground
    proposals for box and mask), then over images.
    """
    n = batch.num_images
    labels = np.concatenate([a.labels for a in assignments])
    reg_t = np.concatenate([a.reg_targets for a in assignments])
    mask_t = np.concatenate([a.mask_targets for a in assignments])
    P, K = out.logits.shape
    active = np.ones(K, dtype=bool)
    if phase == BASE_PHASE:
        active[num_base + 1 :] = False
    if np.any(~active[labels]):
        raise ValueError("assignment uses classes outside the active set")

    seg = batch.seg
    w_cls = 1.0 / (n * batch.counts[seg])
    logits = np.where(active, out.logits, -np.inf)
    probs = softmax(logits, axis=1)
    rows = np.arange(P)
    cls_loss = -np.sum(w_cls * np.log(probs[rows, labels]))
    d_logits = probs.copy()
    d_logits[rows, labels] -= 1.0
    d_logits *= w_cls[:, None]

    fg = np.flatnonzero(labels > 0)
    fg_counts = np.bincount(seg[fg], minlength=n)
    d_deltas = np.zeros_like(out.deltas)
    reg_loss = 0.0
    mask_loss = 0.0
    d_masks = np.zeros_like(out.masks) if out.masks is not None else None
    if len(fg):
        c = labels[fg] - 1
        w_fg = 1.0 / (n * fg_counts[seg[fg]])
        x = out.deltas[fg, c] - reg_t[fg]
        ax = np.abs(x)
        reg_loss = float(np.sum(w_fg[:, None] * np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)))
        d_deltas[fg, c] = w_fg[:, None] * np.clip(x, -1.0, 1.0)
        if segment and out.masks is not None:
            g = out.masks[fg, c]
            t = mask_t[fg]
            mask_loss = float(np.sum(w_fg * np.mean(_softplus(g) - t * g, axis=1)))
            d_masks[fg, c] = w_fg[:, None] * (_sigmoid(g) - t) / MASK_CELLS
    if not segment:
        d_masks = None
    return float(cls_loss), reg_loss, mask_loss, d_logits, d_deltas, d_masks


@dataclass
class LossEvaluation:
    report: LossReport
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    pseudo: list | None = None


def total_loss(
    model: AnyShotModel,
    records: list[ImageRecord],
    assignments: list[TargetAssignment],
    config: TrainConfig,
    phase: str = BASE_PHASE,
    need_grad: bool = True,
    pseudo=None,
) -> LossEvaluation:
    """``rcnn + alpha * weak`` in the base phase, ``rcnn`` alone when fine-tuning."""
    batch = make_batch(records)
    options = phase_options(phase)
    segment = config.segment and model.segment
    out = model.forward(batch.features, options)
    cls_l, reg_l, mask_l, d_log, d_del, d_mask = rcnn_loss(
        out, batch, assignments, model.split.num_base, phase, segment
    )
    grads: dict[str, np.ndarray] = {}
    if need_grad:
        grads, d_weak = heads_backward(out, d_log, d_del, d_mask, model.transfer, options)
        R = model.weak.num_refine
        for r in range(R):
            if config.stop_gradient_weak:
                grads[f"weak.refine{r}.W"] = np.zeros_like(model.weak.refine_W[r])
                grads[f"weak.refine{r}.b"] = np.zeros_like(model.weak.refine_b[r])
            else:
                grads[f"weak.refine{r}.W"] = batch.features.T @ d_weak / R
                grads[f"weak.refine{r}.b"] = d_weak.sum(axis=0) / R

    mil = refine = 0.0
    mined = None
    if phase == BASE_PHASE:
        weak = weak_loss_and_grad(batch, model.weak, pseudo=pseudo, need_grad=need_grad)
        mil, refine, mined = weak.mil, weak.refine, weak.pseudo
        if need_grad:
            for name, g in weak.grads.items():
                grads[name] = grads.get(name, 0.0) + config.alpha * g
        total = cls_l + reg_l + mask_l + config.alpha * (mil + refine)
    else:
        total = cls_l + reg_l + mask_l
    if need_grad:
        for name, arr in model.blocks().items():
            grads.setdefault(name, np.zeros_like(arr))
    return LossEvaluation(LossReport(total, cls_l, reg_l, mask_l, mil, refine), grads, mined)


# --- optimization ---------------------------------------------------------------------


class SGD:
    """SGD with momentum: ``v = mu * v + g``, ``p -= lr * v``."""

    def __init__(self, params: dict[str, np.ndarray], names, lr: float, momentum: float):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(params[n]) for n in self.names}
        self.steps = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for n in self.names:
            v = self.velocity[n]
            v *= self.momentum
            v += grads[n]
            self.params[n] -= self.lr * v
        self.steps += 1


def _batches(num: int, batch_size: int, rng):
    while True:
        order = rng.permutation(num)
        for s in range(0, num - batch_size + 1, batch_size):
            yield order[s : s + batch_size]


def _run(model, records, assignments, config, phase, iterations, lr_at, stream):
    if not records:
        raise ValueError("cannot train on an empty dataset")
    params = model.blocks()
    opt = SGD(params, trainable_blocks(model, phase), lr_at(0), config.momentum)
    rng = np.random.default_rng([config.seed, stream])
    batches = _batches(len(records), min(config.batch_size, len(records)), rng)
    trace = []
    for it in range(iterations):
        idx = next(batches)
        ev = total_loss(model, [records[i] for i in idx], [assignments[i] for i in idx], config, phase)
        trace.append(ev.report)
        opt.lr = lr_at(it)
        opt.step(ev.grads)
    return trace, opt.steps


def step_schedule(base_lr: float, total: int, config: TrainConfig):
    """Learning rate per iteration, decayed at fractions of ``total``."""
    decay_at = [int(round(p * total)) for p in config.lr_decay_points]

    def lr_at(it):
        return base_lr * config.lr_decay_factor ** sum(it >= d for d in decay_at)

    return lr_at


def base_train(model: AnyShotModel, records: list[ImageRecord], config: TrainConfig):
    """Train the weak branch and base heads in place.

    Instance targets come from base-class annotations only; image-level
    labels cover every class (minus any withheld through ``label_mask``).

    Returns:
        (model, per-iteration loss trace)
    """
    if not records:
        raise ValueError("cannot train on an empty dataset")
    scope = model.split.base_ids
    assignments = [assign_targets(r, scope, config.fg_iou_threshold) for r in records]
    total = config.base_iterations
    lr_at = step_schedule(config.learning_rate, total, config)
    trace, _ = _run(model, records, assignments, config, BASE_PHASE, total, lr_at, 0xBA5E)
    return model, trace


def fine_tune(model: AnyShotModel, views: list[ImageRecord], config: TrainConfig):
    """Fit the novel direct-adaptation heads on k-shot views, in place.

    Runs ``finetune_iterations_per_shot * k`` steps. Every other block is
    left untouched.

    Returns:
        (model, per-iteration loss trace)
    """
    if config.k < 1:
        raise ValueError("fine-tuning needs k >= 1; for k = 0 evaluate the base-trained model directly (zero-shot)")
    counts = count_novel_instances(views, model.split)
    over = {model.split.classes[c]: n for c, n in counts.items() if n > config.k}
    if over:
        raise ValueError(f"k-shot views hold more than k={config.k} instances for {over}")
    unused = sum(1 for v in views for a in v.annotations if not model.split.is_novel(a.class_id))
    if unused:
        log.info("fine-tuning ignores %d base-class annotations in the k-shot views", unused)
    scope = model.split.novel_ids
    assignments = [assign_targets(v, scope, config.fg_iou_threshold) for v in views]
    lr = config.finetune_learning_rate if config.finetune_learning_rate is not None else config.learning_rate
    iterations = config.finetune_iterations_per_shot * config.k
    lr_at = step_schedule(lr, iterations, config)
    trace, steps = _run(model, views, assignments, config, FINETUNE_PHASE, iterations, lr_at, 0xF17E)
    model.finetune_steps = steps
    return model, trace


# --- gradient verification -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    per_block: dict[str, float]
    entries_checked: int

    @property
    def worst_block(self) -> str:
        return self.worst_parameter.split("[")[0].split("@")[0]


def randomize(model: AnyShotModel, scale: float = 0.1, seed: int = 0) -> AnyShotModel:
    """Fill every block with small Gaussian noise (for gradient checks)."""
    rng = np.random.default_rng([seed, 0x6C4E])
    for arr in model.blocks().values():
        arr[...] = scale * rng.standard_normal(arr.shape)
    return model


def grad_check(
    model: AnyShotModel,
    records: list[ImageRecord],
    config: TrainConfig,
    step: float = 1e-6,
    max_entries_per_block: int | None = 300,
    phases=(BASE_PHASE, FINETUNE_PHASE),
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Each phase checks its own trainable blocks. Blocks larger than
    ``max_entries_per_block`` are checked on a fixed random subset of
    entries. Error is ``|a - fd| / max(1, |a|, |fd|)``.
    """
    rng = np.random.default_rng([seed, 0x9C])
    per_block: dict[str, float] = {}
    worst, worst_name, checked = 0.0, "", 0
    params = model.blocks()
    for phase in phases:
        scope = model.split.base_ids if phase == BASE_PHASE else model.split.novel_ids
        assignments = [assign_targets(r, scope, config.fg_iou_threshold) for r in records]
        ev = total_loss(model, records, assignments, config, phase)
        for name in trainable_blocks(model, phase):
            arr = params[name]
            flat = arr.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries_per_block is not None and flat.size > max_entries_per_block:
                idx = np.sort(rng.choice(flat.size, size=max_entries_per_block, replace=False))
            analytic = ev.grads[name].reshape(-1)
            block_err = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = total_loss(model, records, assignments, config, phase, need_grad=False, pseudo=ev.pseudo)
                flat[i] = orig - step
                down = total_loss(model, records, assignments, config, phase, need_grad=False, pseudo=ev.pseudo)
                flat[i] = orig
                fd = (up.report.total - down.report.total) / (2 * step)
                err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]), abs(fd))
                checked += 1
                if err > block_err:
                    block_err = err
                if err > worst or not worst_name:
                    worst, worst_name = err, f"{name}[{i}]@{phase}"
            key = f"{name}@{phase}"
            per_block[key] = block_err
    return GradCheckReport(worst, worst_name, per_block, checked)
