"""Deterministic desk-scale detection world.

Each image is a bag of proposals with feature vectors, standing in for a
backbone and a region proposal network. Every object gets one well
localized proposal (IoU >= 0.5) and a few mislocalized "part" proposals
that sit inside the object. Part proposals carry the strongest class
signal, which is what makes image-level supervision prefer them. The first
four feature coordinates hold the offset of the object relative to the
proposal, so box regression is learnable by a linear map.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import apply_deltas, box_area, box_iou, box_to_json, encode_deltas
from .similarity import ClassSplit, EmbeddingTable

FORMAT_VERSION = 1
MASK_SIZE = 14
GEOMETRY_DIMS = 4
BUDGET_CONVERSION = 7  # image-level labels per instance annotation

# rng stream tags, combined with the world seed and an entity counter
_STREAM_PROTOTYPES = 0
_STREAM_TRAIN = 1
_STREAM_TEST = 2
_STREAM_EMBED = 3
_STREAM_FRAMES = 4


@dataclass
class Annotation:
    class_id: int
    box: np.ndarray
    mask: np.ndarray  # (14, 14) bool, drawn relative to ``box``


@dataclass
class ImageRecord:
    image_id: int
    boxes: np.ndarray  # (P, 4) proposal boxes
    features: np.ndarray  # (P, d)
    labels: np.ndarray  # (C,) 0/1 image-level presence
    annotations: list[Annotation] = field(default_factory=list)
    label_mask: np.ndarray | None = None  # (C,) bool; False = label withheld

    @property
    def num_proposals(self) -> int:
        return len(self.boxes)

    def known_labels(self) -> np.ndarray:
        if self.label_mask is None:
            return np.ones(len(self.labels), dtype=bool)
        return self.label_mask


@dataclass
class WorldConfig:
    num_classes: int = 8
    num_base: int = 5
    feature_dim: int = 32
    images_train: int = 200
    images_test: int = 100
    min_objects: int = 1
    max_objects: int = 4
    proposal_jitter: float = 0.35
    positive_min_iou: float = 0.5
    part_proposals_per_object: int = 2
    negative_proposals_per_image: int = 8
    feature_noise: float = 0.5
    geometry_scale: float = 4.0
    geometry_noise: float = 0.1
    part_emphasis: float = 1.0
    part_area_min: float = 0.2
    part_area_max: float = 0.45
    context_proposal: bool = False
    class_geometry_frames: bool = True
    signal_scale: float = 3.0
    min_box_size: float = 0.15
    max_box_size: float = 0.4
    novel_parent_cos: float = 0.6
    embedding_dim: int = 300
    embedding_scale: float = 5.0
    lingual_noise: float = 0.5
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.num_classes < 2:
            out.append("num_classes must be >= 2")
        if not 1 <= self.num_base < self.num_classes:
            out.append("num_base must satisfy 1 <= num_base < num_classes")
        if self.feature_dim <= GEOMETRY_DIMS:
            out.append(f"feature_dim must exceed {GEOMETRY_DIMS}")
        for name in ("images_train", "images_test", "min_objects", "max_objects", "embedding_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.max_objects < self.min_objects:
            out.append("max_objects must be >= min_objects")
        for name in ("part_proposals_per_object", "negative_proposals_per_image"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        for name in ("feature_noise", "geometry_noise", "part_emphasis", "proposal_jitter", "lingual_noise"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if not 0 < self.min_box_size <= self.max_box_size < 1:
            out.append("box sizes must satisfy 0 < min_box_size <= max_box_size < 1")
        if not -1 <= self.novel_parent_cos <= 1:
            out.append("novel_parent_cos must lie in [-1, 1]")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("invalid world config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, obj: dict) -> "WorldConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ValueError(f"unknown world config keys: {unknown}")
        return cls(**obj)


@dataclass
class Dataset:
    train: list[ImageRecord]
    test: list[ImageRecord]
    split: ClassSplit
    embeddings: EmbeddingTable
    config: WorldConfig | None = None


def class_names(num_classes: int) -> list[str]:
    return [f"class{j}" for j in range(num_classes)]


def shape_family(class_id: int) -> str:
    return "rectangle" if class_id % 2 == 0 else "ellipse"


def mask_template(family: str) -> np.ndarray:
    """14x14 foreground template drawn in box-relative coordinates."""
    c = (np.arange(MASK_SIZE) + 0.5) / MASK_SIZE
    xx, yy = np.meshgrid(c, c)
    if family == "rectangle":
        # both shapes fill under half the box, so a full-box mask is a poor guess
        return (xx > 0.2) & (xx < 0.8) & (yy > 0.25) & (yy < 0.75)
    if family == "ellipse":
        return ((xx - 0.5) / 0.38) ** 2 + ((yy - 0.5) / 0.32) ** 2 <= 1.0
    raise ValueError(f"unknown shape family {family!r}")


def _unit(v):
    return v / np.linalg.norm(v)


def novel_parents(num_classes: int, num_base: int) -> dict[int, int]:
    """Base class each novel class is derived from, matched on shape family."""
    parents = {}
    for n in range(num_base, num_classes):
        same = [b for b in range(num_base) if shape_family(b) == shape_family(n)]
        pool = same or list(range(num_base))
        parents[n] = pool[(n - num_base) % len(pool)]
    return parents


def make_prototypes(config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit class prototypes (C, d-4) and a background prototype (d-4,)."""
    rng = np.random.default_rng([config.seed, _STREAM_PROTOTYPES])
    dim = config.feature_dim - GEOMETRY_DIMS
    raw = rng.standard_normal((config.num_classes + 1, dim))
    protos = np.array([_unit(v) for v in raw[: config.num_classes]])
    cos = config.novel_parent_cos
    for n, p in novel_parents(config.num_classes, config.num_base).items():
        own = raw[n] - (raw[n] @ protos[p]) * protos[p]
        protos[n] = _unit(cos * protos[p] + np.sqrt(max(0.0, 1 - cos**2)) * _unit(own))
    background = _unit(raw[config.num_classes])
    return protos, background


def make_geometry_frames(config: WorldConfig) -> np.ndarray:
    """(C, 4, 4) orthogonal maps from box deltas to each class's geometry features.

    Base classes get independent random frames and novel classes share their
    parent's, so geometric cues are class specific but transferable between
    related classes. Without ``class_geometry_frames`` every frame is the identity.
    """
    frames = np.tile(np.eye(GEOMETRY_DIMS), (config.num_classes, 1, 1))
    if not config.class_geometry_frames:
        return frames
    rng = np.random.default_rng([config.seed, _STREAM_FRAMES])
    for b in range(config.num_base):
        q, r = np.linalg.qr(rng.standard_normal((GEOMETRY_DIMS, GEOMETRY_DIMS)))
        frames[b] = q * np.sign(np.diag(r))
    for n, p in novel_parents(config.num_classes, config.num_base).items():
        frames[n] = frames[p]
    return frames


def make_embeddings(config: WorldConfig, names: list[str], protos: np.ndarray) -> EmbeddingTable:
    rng = np.random.default_rng([config.seed, _STREAM_EMBED])
    dim = protos.shape[1]
    lift, _ = np.linalg.qr(rng.standard_normal((config.embedding_dim, max(dim, 1))))
    lift = lift[:, :dim] if config.embedding_dim >= dim else rng.standard_normal((config.embedding_dim, dim))
    table = EmbeddingTable()
    for name, proto in zip(names, protos):
        noise = rng.standard_normal(config.embedding_dim) / np.sqrt(config.embedding_dim)
        table[name] = config.embedding_scale * _unit(lift @ proto + config.lingual_noise * noise)
    return table


def _random_box(rng, config: WorldConfig) -> np.ndarray:
    w, h = rng.uniform(config.min_box_size, config.max_box_size, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _positive_proposal(rng, gt, jitter, min_iou) -> np.ndarray:
    for _ in range(100):
        d = rng.uniform(-jitter, jitter, size=4)
        box = apply_deltas(gt, d)
        if box[2] > box[0] and box[3] > box[1] and box_iou(box, gt)[0, 0] >= min_iou:
            return box
    return gt.copy()


def _context_proposal(rng, gt) -> np.ndarray:
    """``gt`` enlarged about its center so that IoU falls in [0.5, 0.6]."""
    f = np.sqrt(1.0 / rng.uniform(0.5, 0.6))
    cx, cy = 0.5 * (gt[0] + gt[2]), 0.5 * (gt[1] + gt[3])
    hw, hh = 0.5 * f * (gt[2] - gt[0]), 0.5 * f * (gt[3] - gt[1])
    # clipping only shrinks the enlarged box towards gt, which raises IoU
    return np.clip(np.array([cx - hw, cy - hh, cx + hw, cy + hh]), 0.0, 1.0)


def _part_proposal(rng, gt, area_min, area_max) -> np.ndarray:
    """Sub-box of ``gt`` covering between ``area_min`` and ``area_max`` of its area."""
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    while True:
        fw, fh = rng.uniform(area_min, 1.0, size=2)
        if area_min <= fw * fh <= area_max:
            break
    x1 = gt[0] + rng.uniform(0, 1 - fw) * w
    y1 = gt[1] + rng.uniform(0, 1 - fh) * h
    return np.array([x1, y1, x1 + fw * w, y1 + fh * h])


def _intersection_over_proposal(box, gt) -> float:
    iw = max(0.0, min(box[2], gt[2]) - max(box[0], gt[0]))
    ih = max(0.0, min(box[3], gt[3]) - max(box[1], gt[1]))
    return iw * ih / ((box[2] - box[0]) * (box[3] - box[1]))


def _object_feature(rng, config, proposal, gt, proto, frame, background) -> np.ndarray:
    signal = _intersection_over_proposal(proposal, gt)
    # small, tight regions carry the most class evidence (discriminative parts)
    coverage = min(1.0, signal * box_area(proposal) / box_area(gt))
    emphasis = 1.0 + config.part_emphasis * (1.0 - coverage)
    geometry = config.geometry_scale * frame @ encode_deltas(proposal, gt)
    geometry += config.geometry_noise * rng.standard_normal(GEOMETRY_DIMS)
    appearance = config.signal_scale * (emphasis * signal * proto + (1.0 - signal) * background)
    return np.concatenate([geometry, appearance + config.feature_noise * rng.standard_normal(appearance.shape)])


def _background_feature(rng, config, background) -> np.ndarray:
    geometry = config.geometry_scale * rng.uniform(-0.5, 0.5, size=GEOMETRY_DIMS)
    appearance = config.signal_scale * background
    return np.concatenate([geometry, appearance + config.feature_noise * rng.standard_normal(appearance.shape)])


def generate_image(config: WorldConfig, image_id: int, stream: int, protos, background, frames) -> ImageRecord:
    rng = np.random.default_rng([config.seed, stream, image_id])
    templates = {f: mask_template(f) for f in ("rectangle", "ellipse")}
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    annotations, boxes, feats = [], [], []
    for _ in range(n_obj):
        cls = int(rng.integers(config.num_classes))
        gt = _random_box(rng, config)
        annotations.append(Annotation(cls, gt, templates[shape_family(cls)].copy()))
        props = [_positive_proposal(rng, gt, config.proposal_jitter, config.positive_min_iou)]
        if config.context_proposal:
            props.append(_context_proposal(rng, gt))
        props += [_part_proposal(rng, gt, config.part_area_min, config.part_area_max) for _ in range(config.part_proposals_per_object)]
        for p in props:
            boxes.append(p)
            feats.append(_object_feature(rng, config, p, gt, protos[cls], frames[cls], background))
    for _ in range(config.negative_proposals_per_image):
        boxes.append(_random_box(rng, config))
        feats.append(_background_feature(rng, config, background))
    order = rng.permutation(len(boxes))
    labels = np.zeros(config.num_classes, dtype=np.int64)
    for a in annotations:
        labels[a.class_id] = 1
    return ImageRecord(
        image_id=image_id,
        boxes=np.array(boxes)[order],
        features=np.array(feats)[order],
        labels=labels,
        annotations=annotations,
    )


def generate_dataset(config: WorldConfig | None = None) -> Dataset:
    config = config or WorldConfig()
    config.validate()
    names = class_names(config.num_classes)
    split = ClassSplit(tuple(names[: config.num_base]), tuple(names[config.num_base :]))
    protos, background = make_prototypes(config)
    frames = make_geometry_frames(config)
    train = [
        generate_image(config, i, _STREAM_TRAIN, protos, background, frames) for i in range(config.images_train)
    ]
    test = [
        generate_image(config, config.images_train + i, _STREAM_TEST, protos, background, frames)
        for i in range(config.images_test)
    ]
    return Dataset(train, test, split, make_embeddings(config, names, protos), config)


# --- views -----------------------------------------------------------------


def restrict_annotations(record: ImageRecord, keep) -> ImageRecord:
    return dataclasses.replace(record, annotations=[record.annotations[i] for i in keep])


def sample_kshot(records: list[ImageRecord], split: ClassSplit, k: int, seed: int) -> list[ImageRecord]:
    """Views holding exactly ``k`` instances of each novel class.

    Whole images are taken in random order while they fit within the
    remaining per-class quota, so most views keep every novel instance they
    contain. Classes still short afterwards are completed instance by
    instance; those views drop the novel annotations that were not chosen.
    Base annotations are always kept.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    novel = [int(n) for n in split.novel_ids]
    pools = {n: [(r_i, a_i) for r_i, r in enumerate(records) for a_i, a in enumerate(r.annotations) if a.class_id == n]
             for n in novel}
    for n, pool in pools.items():
        if len(pool) < k:
            raise ValueError(f"novel class {split.classes[n]!r} has {len(pool)} instances, {k} shots requested")
    rng = np.random.default_rng([seed, 0x5407])
    need = {n: k for n in novel}
    chosen: dict[int, set[int]] = {}
    for r_i in rng.permutation(len(records)):
        r_i = int(r_i)
        mine = [(a_i, a.class_id) for a_i, a in enumerate(records[r_i].annotations) if split.is_novel(a.class_id)]
        counts: dict[int, int] = {}
        for _, c in mine:
            counts[c] = counts.get(c, 0) + 1
        if mine and all(counts[c] <= need[c] for c in counts):
            chosen[r_i] = {a_i for a_i, _ in mine}
            for c, m in counts.items():
                need[c] -= m
        if not any(need.values()):
            break
    for n in novel:
        free = [p for p in pools[n] if p[0] not in chosen or p[1] not in chosen[p[0]]]
        for idx in rng.permutation(len(free))[: need[n]]:
            r_i, a_i = free[idx]
            chosen.setdefault(r_i, set()).add(a_i)
    views = []
    for r_i in sorted(chosen):
        record = records[r_i]
        keep = [
            a_i
            for a_i, a in enumerate(record.annotations)
            if not split.is_novel(a.class_id) or a_i in chosen[r_i]
        ]
        views.append(restrict_annotations(record, keep))
    return views


def count_novel_instances(views: list[ImageRecord], split: ClassSplit) -> dict[int, int]:
    counts = {int(n): 0 for n in split.novel_ids}
    for v in views:
        for a in v.annotations:
            if split.is_novel(a.class_id):
                counts[a.class_id] += 1
    return counts


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class BudgetAllocation:
    k: int
    shots: list[ImageRecord]
    weak_image_ids: list[int]
    train: list[ImageRecord]  # base-training records with novel labels withheld outside the weak subset


def budget_allocate(
    records: list[ImageRecord], split: ClassSplit, budget: int, weak_fraction: float, seed: int
) -> BudgetAllocation:
    """Split an annotation budget between instance shots and weak image labels.

    ``round((1 - f) * budget)`` shots per novel class and
    ``7 * round(f * budget)`` images with novel image-level labels. Every
    other image has its novel labels withheld, except the shot images, whose
    instance annotations already reveal them.
    """
    if not 0.0 <= weak_fraction <= 1.0:
        raise ValueError("weak_fraction must lie in [0, 1]")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    k = _round_half_up((1.0 - weak_fraction) * budget)
    n_weak = BUDGET_CONVERSION * _round_half_up(weak_fraction * budget)
    shots = sample_kshot(records, split, k, seed)
    used = {v.image_id for v in shots}
    novel = split.novel_ids
    candidates = [r.image_id for r in records if r.image_id not in used and r.labels[novel].any()]
    if n_weak > len(candidates):
        raise ValueError(
            f"budget needs {n_weak} weakly labelled novel images, only {len(candidates)} available"
        )
    rng = np.random.default_rng([seed, 0xB0D6])
    weak_ids = sorted(int(i) for i in rng.choice(candidates, size=n_weak, replace=False)) if n_weak else []
    weak_set = set(weak_ids)
    train = []
    for r in records:
        mask = r.known_labels().copy()
        if r.image_id not in weak_set and r.image_id not in used:
            mask[novel] = False
        train.append(dataclasses.replace(r, label_mask=mask))
    return BudgetAllocation(k, shots, weak_ids, train)


# --- serialization -----------------------------------------------------------


def mask_to_str(mask) -> str:
    return "".join("1" if v else "0" for v in np.asarray(mask, dtype=bool).reshape(-1))


def mask_from_str(s: str) -> np.ndarray:
    if len(s) != MASK_SIZE * MASK_SIZE or set(s) - {"0", "1"}:
        raise ValueError("mask strings must be 196 characters of '0'/'1'")
    return np.array([c == "1" for c in s]).reshape(MASK_SIZE, MASK_SIZE)


def record_to_json(r: ImageRecord, split: ClassSplit, subset: str) -> dict:
    obj = {
        "image_id": r.image_id,
        "subset": subset,
        "labels": [int(v) for v in r.labels],
        "proposals": [
            {"box": box_to_json(b), "z": [float(v) for v in z]} for b, z in zip(r.boxes, r.features)
        ],
        "annotations": [
            {"class": split.classes[a.class_id], "box": box_to_json(a.box), "mask": mask_to_str(a.mask)}
            for a in r.annotations
        ],
    }
    if r.label_mask is not None:
        obj["label_mask"] = [bool(v) for v in r.label_mask]
    return obj


def record_from_json(obj: dict, split: ClassSplit, feature_dim: int | None = None) -> ImageRecord:
    props = obj["proposals"]
    d = feature_dim if feature_dim is not None else (len(props[0]["z"]) if props else 0)
    return ImageRecord(
        image_id=int(obj["image_id"]),
        boxes=np.array([p["box"] for p in props], dtype=np.float64).reshape(-1, 4),
        features=np.array([p["z"] for p in props], dtype=np.float64).reshape(-1, d),
        labels=np.array(obj["labels"], dtype=np.int64),
        annotations=[
            Annotation(split.index(a["class"]), np.array(a["box"], dtype=np.float64), mask_from_str(a["mask"]))
            for a in obj["annotations"]
        ],
        label_mask=np.array(obj["label_mask"], dtype=bool) if "label_mask" in obj else None,
    )


def dataset_to_json(ds: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(ds.config) if ds.config else None,
        "class_split": ds.split.to_json(),
        "embeddings": ds.embeddings.to_json(),
        "images": [record_to_json(r, ds.split, "train") for r in ds.train]
        + [record_to_json(r, ds.split, "test") for r in ds.test],
    }


def dataset_from_json(obj: dict) -> Dataset:
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {obj.get('format_version')!r}")
    split = ClassSplit.from_json(obj["class_split"])
    config = WorldConfig.from_dict(obj["config"]) if obj.get("config") else None
    fdim = config.feature_dim if config else None
    train, test = [], []
    for img in obj["images"]:
        (train if img["subset"] == "train" else test).append(record_from_json(img, split, fdim))
    return Dataset(train, test, split, EmbeddingTable(obj["embeddings"]), config)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_json(ds), separators=(",", ":")) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    return dataset_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
