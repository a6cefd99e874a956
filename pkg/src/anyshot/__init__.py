"""Any-shot detection and segmentation by transferring weak-to-strong
refinements from base classes to novel classes over a synthetic proposal world."""

from .evaluation import EvalReport, average_precision, evaluate_model, match_detections, mask_paste_iou
from .geometry import ScoredBox, apply_deltas, box_iou, encode_deltas, nms
from .model import ModelConfig, AnyShotModel
from .similarity import ClassSplit, EmbeddingTable, combine_similarity, lingual_matrix, visual_vector
from .synthworld import (
    Dataset,
    WorldConfig,
    budget_allocate,
    generate_dataset,
    load_dataset,
    sample_kshot,
    save_dataset,
)
from .training import TrainConfig, base_train, fine_tune, grad_check, total_loss
from .transfer import ABLATION_VARIANTS, Detection, TransferOptions, predict_image

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS",
    "ClassSplit",
    "Dataset",
    "Detection",
    "EmbeddingTable",
    "EvalReport",
    "ModelConfig",
    "ScoredBox",
    "TrainConfig",
    "TransferOptions",
    "AnyShotModel",
    "WorldConfig",
    "apply_deltas",
    "average_precision",
    "base_train",
    "box_iou",
    "budget_allocate",
    "combine_similarity",
    "encode_deltas",
    "evaluate_model",
    "fine_tune",
    "generate_dataset",
    "grad_check",
    "lingual_matrix",
    "load_dataset",
    "mask_paste_iou",
    "match_detections",
    "nms",
    "predict_image",
    "sample_kshot",
    "save_dataset",
    "total_loss",
    "visual_vector",
]
