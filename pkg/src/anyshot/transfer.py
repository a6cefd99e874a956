"""Base refinement heads and similarity-weighted novel heads.

Base classes refine the weak logits with a zero-initialized residual and
learn their own box regressor and mask head. Novel classes borrow from
the base heads: for every proposal, a row-stochastic similarity matrix
mixes base residuals, base box deltas and base mask logits into novel
ones. A per-novel-class direct head adds what few-shot fine-tuning
learns.

Head functions accept a single feature vector ``(d,)`` or a stack
``(P, d)`` and keep the leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DEFAULT_NMS_THRESHOLD, apply_deltas, nms_indices
from .similarity import ClassSplit, combine_similarity, softmax

MASK_SIZE = 14
MASK_CELLS = MASK_SIZE * MASK_SIZE


class TaskDisabledError(RuntimeError):
    pass


@dataclass
class TransferParams:
    base_cls_W: np.ndarray  # (d, B + 1), column 0 = background
    base_cls_b: np.ndarray
    base_reg_W: np.ndarray  # (d, B * 4)
    base_reg_b: np.ndarray
    base_seg_W: np.ndarray  # (d, B * 196)
    base_seg_b: np.ndarray
    novel_cls_W: np.ndarray  # (d, N)
    novel_cls_b: np.ndarray
    novel_reg_W: np.ndarray  # (d, N * 4)
    novel_reg_b: np.ndarray
    novel_seg_W: np.ndarray  # (d, N * 196)
    novel_seg_b: np.ndarray

    @classmethod
    def zeros(cls, feature_dim: int, split: ClassSplit) -> "TransferParams":
        d, B, N = feature_dim, split.num_base, split.num_novel
        shapes = {
            "base_cls": B + 1,
            "base_reg": B * 4,
            "base_seg": B * MASK_CELLS,
            "novel_cls": N,
            "novel_reg": N * 4,
            "novel_seg": N * MASK_CELLS,
        }
        kwargs = {}
        for name, width in shapes.items():
            kwargs[name + "_W"] = np.zeros((d, width))
            kwargs[name + "_b"] = np.zeros(width)
        return cls(**kwargs)

    @property
    def num_base(self) -> int:
        return self.base_reg_b.shape[0] // 4

    @property
    def num_novel(self) -> int:
        return self.novel_cls_b.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        out = {}
        for head in ("base_cls", "base_reg", "base_seg", "novel_cls", "novel_reg", "novel_seg"):
            out[head + ".W"] = getattr(self, head + "_W")
            out[head + ".b"] = getattr(self, head + "_b")
        return out


DIRECT_BLOCKS = ("novel_cls.W", "novel_cls.b", "novel_reg.W", "novel_reg.b", "novel_seg.W", "novel_seg.b")


@dataclass(frozen=True)
class TransferOptions:
    """Which novel-class terms are active.

    ``similarity`` is one of ``"lingual_visual"`` (the full model),
    ``"lingual"``, ``"uniform"`` or ``"none"`` (no transfer at all).
    """

    similarity: str = "lingual_visual"
    cls: bool = True
    reg: bool = True
    seg: bool = True
    include_direct: bool = False

    def __post_init__(self):
        if self.similarity not in ("lingual_visual", "lingual", "uniform", "none"):
            raise ValueError(f"unknown similarity mode {self.similarity!r}")


ABLATION_VARIANTS = {
    "weak": TransferOptions(similarity="none", cls=False, reg=False, seg=False),
    "avg": TransferOptions(similarity="uniform", cls=True, reg=False, seg=False),
    "lin": TransferOptions(similarity="lingual", cls=True, reg=False, seg=False),
    "lin+vis": TransferOptions(similarity="lingual_visual", cls=True, reg=False, seg=False),
    "lin+vis+reg": TransferOptions(similarity="lingual_visual", cls=True, reg=True, seg=False),
    "lin+vis+reg+seg": TransferOptions(similarity="lingual_visual", cls=True, reg=True, seg=True),
}


def _linear(z, W, b):
    return np.asarray(z, dtype=np.float64) @ W + b


# --- per-head operations -------------------------------------------------------


def base_cls_logits(weak_logits, z, transfer: TransferParams) -> np.ndarray:
    """Weak ``[background | base]`` logits plus the residual head.

    Args:
        weak_logits: (..., C + 1) averaged weak logits, background first.
        z: (..., d) features.

    Returns:
        (..., B + 1) logits, background first.
    """
    B = transfer.num_base
    weak = np.asarray(weak_logits, dtype=np.float64)[..., : B + 1]
    return weak + _linear(z, transfer.base_cls_W, transfer.base_cls_b)


def base_reg_deltas(z, transfer: TransferParams) -> np.ndarray:
    out = _linear(z, transfer.base_reg_W, transfer.base_reg_b)
    return out.reshape(out.shape[:-1] + (transfer.num_base, 4))


def base_seg_logits(z, transfer: TransferParams, segment: bool = True) -> np.ndarray:
    if not segment:
        raise TaskDisabledError("segmentation is disabled for this model")
    out = _linear(z, transfer.base_seg_W, transfer.base_seg_b)
    return out.reshape(out.shape[:-1] + (transfer.num_base, MASK_SIZE, MASK_SIZE))


def _check_similarity(S, transfer: TransferParams) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape[-2:] != (transfer.num_novel, transfer.num_base):
        raise ValueError(
            f"similarity must be (..., {transfer.num_novel}, {transfer.num_base}), got {S.shape}"
        )
    return S


def novel_cls_logits(weak_logits, z, transfer: TransferParams, S, include_direct: bool) -> np.ndarray:
    """Weak novel logits + similarity-weighted base residuals (+ direct head).

    ``weak_logits`` is the full (..., C + 1) averaged weak output.
    """
    S = _check_similarity(S, transfer)
    B = transfer.num_base
    weak = np.asarray(weak_logits, dtype=np.float64)[..., B + 1 :]
    residual = _linear(z, transfer.base_cls_W, transfer.base_cls_b)[..., 1:]
    out = weak + np.einsum("...nb,...b->...n", S, residual)
    if include_direct:
        out = out + _linear(z, transfer.novel_cls_W, transfer.novel_cls_b)
    return out


def novel_reg_deltas(z, transfer: TransferParams, S, include_direct: bool) -> np.ndarray:
    S = _check_similarity(S, transfer)
    out = np.einsum("...nb,...bk->...nk", S, base_reg_deltas(z, transfer))
    if include_direct:
        direct = _linear(z, transfer.novel_reg_W, transfer.novel_reg_b)
        out = out + direct.reshape(direct.shape[:-1] + (transfer.num_novel, 4))
    return out


def novel_seg_logits(z, transfer: TransferParams, S, include_direct: bool, segment: bool = True) -> np.ndarray:
    if not segment:
        raise TaskDisabledError("segmentation is disabled for this model")
    S = _check_similarity(S, transfer)
    out = np.einsum("...nb,...bhw->...nhw", S, base_seg_logits(z, transfer))
    if include_direct:
        direct = _linear(z, transfer.novel_seg_W, transfer.novel_seg_b)
        out = out + direct.reshape(direct.shape[:-1] + (transfer.num_novel, MASK_SIZE, MASK_SIZE))
    return out


# --- batched forward / backward ---------------------------------------------------


def similarity_for(options: TransferOptions, s_lin, weak_fg_logits, num_base: int) -> np.ndarray:
    """(P, N, B) similarity rows for every proposal under ``options``."""
    P = weak_fg_logits.shape[0]
    N = s_lin.shape[0]
    if options.similarity in ("uniform", "none"):
        return np.full((P, N, num_base), 1.0 / num_base)
    if options.similarity == "lingual":
        return np.broadcast_to(softmax(s_lin, axis=1), (P, N, num_base)).copy()
    # softmax over all classes restricted to base and renormalized is a
    # softmax over the base logits alone
    s_vis = softmax(weak_fg_logits[:, :num_base], axis=1)
    return combine_similarity(s_lin, s_vis)


@dataclass
class HeadOutputs:
    logits: np.ndarray  # (P, C + 1), background first
    deltas: np.ndarray  # (P, C, 4)
    masks: np.ndarray | None  # (P, C, 196) logits
    cache: dict = field(default_factory=dict, repr=False)


def heads_forward(Z, weak_mean, transfer: TransferParams, s_lin, options: TransferOptions, segment: bool):
    """Joint ``[background | base | novel]`` outputs for stacked proposals."""
    B, N = transfer.num_base, transfer.num_novel
    P = Z.shape[0]
    F = weak_mean[:, 1:]
    S = similarity_for(options, s_lin, F, B)
    D = Z @ transfer.base_cls_W + transfer.base_cls_b
    logits = np.empty((P, 1 + B + N))
    logits[:, : B + 1] = weak_mean[:, : B + 1] + D
    novel = weak_mean[:, B + 1 :].copy()
    if options.cls and options.similarity != "none":
        novel += np.einsum("pnb,pb->pn", S, D[:, 1:])
    if options.include_direct:
        novel += Z @ transfer.novel_cls_W + transfer.novel_cls_b
    logits[:, B + 1 :] = novel

    Rb = (Z @ transfer.base_reg_W + transfer.base_reg_b).reshape(P, B, 4)
    Rn = np.zeros((P, N, 4))
    if options.reg and options.similarity != "none":
        Rn += np.einsum("pnb,pbk->pnk", S, Rb)
    if options.include_direct:
        Rn += (Z @ transfer.novel_reg_W + transfer.novel_reg_b).reshape(P, N, 4)
    deltas = np.concatenate([Rb, Rn], axis=1)

    masks = Gb = None
    if segment:
        Gb = (Z @ transfer.base_seg_W + transfer.base_seg_b).reshape(P, B, MASK_CELLS)
        Gn = np.zeros((P, N, MASK_CELLS))
        if options.seg and options.similarity != "none":
            Gn += np.einsum("pnb,pbk->pnk", S, Gb)
        if options.include_direct:
            Gn += (Z @ transfer.novel_seg_W + transfer.novel_seg_b).reshape(P, N, MASK_CELLS)
        masks = np.concatenate([Gb, Gn], axis=1)
    cache = {"Z": Z, "S": S, "D": D, "Rb": Rb, "Gb": Gb, "F": F, "s_lin": s_lin}
    return HeadOutputs(logits, deltas, masks, cache)


def heads_backward(out: HeadOutputs, d_logits, d_deltas, d_masks, transfer: TransferParams, options: TransferOptions):
    """Gradients of a scalar loss given its gradients w.r.t. head outputs.

    Returns:
        (grads for transfer blocks, gradient w.r.t. the averaged weak
        logits of shape (P, C + 1)).
    """
    c = out.cache
    Z, S, D, Rb, Gb, F = c["Z"], c["S"], c["D"], c["Rb"], c["Gb"], c["F"]
    B, N = transfer.num_base, transfer.num_novel
    P = Z.shape[0]
    grads = {}
    transfers = options.similarity != "none"
    dS = np.zeros_like(S)

    d_weak = np.zeros((P, 1 + B + N))
    d_weak[:] = d_logits
    dD = d_logits[:, : B + 1].copy()
    dn = d_logits[:, B + 1 :]
    if options.cls and transfers:
        dD[:, 1:] += np.einsum("pn,pnb->pb", dn, S)
        dS += dn[:, :, None] * D[:, None, 1:]
    grads["base_cls.W"] = Z.T @ dD
    grads["base_cls.b"] = dD.sum(axis=0)
    grads["novel_cls.W"] = Z.T @ dn if options.include_direct else np.zeros_like(transfer.novel_cls_W)
    grads["novel_cls.b"] = dn.sum(axis=0) if options.include_direct else np.zeros_like(transfer.novel_cls_b)

    dRb = d_deltas[:, :B].copy()
    dRn = d_deltas[:, B:]
    if options.reg and transfers:
        dRb += np.einsum("pnk,pnb->pbk", dRn, S)
        dS += np.einsum("pnk,pbk->pnb", dRn, Rb)
    grads["base_reg.W"] = Z.T @ dRb.reshape(P, -1)
    grads["base_reg.b"] = dRb.reshape(P, -1).sum(axis=0)
    flat = dRn.reshape(P, -1)
    grads["novel_reg.W"] = Z.T @ flat if options.include_direct else np.zeros_like(transfer.novel_reg_W)
    grads["novel_reg.b"] = flat.sum(axis=0) if options.include_direct else np.zeros_like(transfer.novel_reg_b)

    if d_masks is not None and Gb is not None:
        dGb = d_masks[:, :B].copy()
        dGn = d_masks[:, B:]
        if options.seg and transfers:
            dGb += np.einsum("pnk,pnb->pbk", dGn, S)
            dS += np.einsum("pnk,pbk->pnb", dGn, Gb)
        grads["base_seg.W"] = Z.T @ dGb.reshape(P, -1)
        grads["base_seg.b"] = dGb.reshape(P, -1).sum(axis=0)
        flat = dGn.reshape(P, -1)
        grads["novel_seg.W"] = Z.T @ flat if options.include_direct else np.zeros_like(transfer.novel_seg_W)
        grads["novel_seg.b"] = flat.sum(axis=0) if options.include_direct else np.zeros_like(transfer.novel_seg_b)
    else:
        for name in ("base_seg", "novel_seg"):
            grads[name + ".W"] = np.zeros_like(getattr(transfer, name + "_W"))
            grads[name + ".b"] = np.zeros_like(getattr(transfer, name + "_b"))

    if options.similarity == "lingual_visual":
        # S = softmax_b(s_lin[n, b] * v[b]),  v = softmax(F[:, :B])
        s_lin = c["s_lin"]
        dA = S * (dS - np.sum(dS * S, axis=2, keepdims=True))
        dv = np.einsum("pnb,nb->pb", dA, s_lin)
        v = softmax(F[:, :B], axis=1)
        d_weak[:, 1 : B + 1] += v * (dv - np.sum(dv * v, axis=1, keepdims=True))
    return grads, d_weak


# --- inference --------------------------------------------------------------------


@dataclass
class Detection:
    class_name: str
    score: float
    box: np.ndarray
    mask: np.ndarray | None = None  # (14, 14) probabilities
    class_id: int = -1

    def to_json(self, image_id: int) -> dict:
        obj = {
            "image_id": int(image_id),
            "class": self.class_name,
            "score": float(self.score),
            "box": [float(v) for v in self.box],
        }
        if self.mask is not None:
            obj["mask"] = [float(v) for v in self.mask.reshape(-1)]
        return obj


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def class_scores(logits, num_base: int, joint_softmax: bool = True) -> np.ndarray:
    """(P, C) per-class probabilities from (P, C + 1) logits."""
    if joint_softmax:
        return softmax(logits, axis=1)[:, 1:]
    base = softmax(logits[:, : num_base + 1], axis=1)[:, 1:]
    novel = softmax(np.concatenate([logits[:, :1], logits[:, num_base + 1 :]], axis=1), axis=1)[:, 1:]
    return np.concatenate([base, novel], axis=1)


def predict_image(
    record,
    model,
    mode: str = "all",
    score_threshold: float = 0.05,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    options: TransferOptions | None = None,
    joint_softmax: bool = True,
) -> list[Detection]:
    """Scored, regressed and (optionally) masked detections for one image.

    ``mode`` keeps ``"base"``, ``"novel"`` or ``"all"`` classes.
    """
    if mode not in ("base", "novel", "all"):
        raise ValueError(f"mode must be base, novel or all, got {mode!r}")
    if record.num_proposals == 0:
        return []
    split = model.split
    out = model.forward(record.features, options)
    scores = class_scores(out.logits, split.num_base, joint_softmax)
    classes = {"base": split.base_ids, "novel": split.novel_ids, "all": np.arange(split.num_classes)}[mode]
    sub = scores[:, classes]
    p_idx, c_col = np.nonzero(sub >= score_threshold)
    if len(p_idx) == 0:
        return []
    cls_ids = classes[c_col]
    dets_scores = sub[p_idx, c_col]
    boxes = apply_deltas(record.boxes[p_idx], out.deltas[p_idx, cls_ids])
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    p_idx, cls_ids, dets_scores, boxes = p_idx[valid], cls_ids[valid], dets_scores[valid], boxes[valid]
    keep = nms_indices(boxes, dets_scores, cls_ids, nms_threshold)
    result = []
    for i in keep:
        mask = None
        if out.masks is not None:
            mask = _sigmoid(out.masks[p_idx[i], cls_ids[i]]).reshape(MASK_SIZE, MASK_SIZE)
        result.append(
            Detection(split.classes[cls_ids[i]], float(dets_scores[i]), boxes[i], mask, int(cls_ids[i]))
        )
    return result
