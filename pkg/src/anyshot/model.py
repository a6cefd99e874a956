"""Full detector: weak branch, base refinements and novel transfer."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .similarity import ClassSplit, EmbeddingTable, lingual_matrix
from .transfer import HeadOutputs, TransferOptions, TransferParams, heads_forward
from .weak_detector import WeakDetectorParams, mean_refine_logits

FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    num_refine: int = 3
    segment: bool = True
    normalize_lingual: bool = False
    init_scale: float = 0.01


class AnyShotModel:
    def __init__(
        self,
        split: ClassSplit,
        feature_dim: int,
        weak: WeakDetectorParams,
        transfer: TransferParams,
        s_lin: np.ndarray,
        config: ModelConfig | None = None,
    ):
        self.split = split
        self.feature_dim = feature_dim
        self.weak = weak
        self.transfer = transfer
        self.s_lin = np.asarray(s_lin, dtype=np.float64)
        self.config = config or ModelConfig(num_refine=weak.num_refine)
        self.finetune_steps = 0  # SGD steps taken by the last fine-tuning run
        if self.s_lin.shape != (split.num_novel, split.num_base):
            raise ValueError("lingual similarity must be (num_novel, num_base)")

    @classmethod
    def initialize(
        cls,
        split: ClassSplit,
        embeddings: EmbeddingTable,
        feature_dim: int,
        config: ModelConfig | None = None,
        seed: int = 0,
    ) -> "AnyShotModel":
        config = config or ModelConfig()
        rng = np.random.default_rng([seed, 0x1417])
        weak = WeakDetectorParams.initialize(
            feature_dim, split.num_classes, config.num_refine, rng, config.init_scale
        )
        transfer = TransferParams.zeros(feature_dim, split)
        s_lin = lingual_matrix(split, embeddings, normalize=config.normalize_lingual)
        return cls(split, feature_dim, weak, transfer, s_lin, config)

    @property
    def segment(self) -> bool:
        return self.config.segment

    def blocks(self) -> dict[str, np.ndarray]:
        """Every trainable array by name; the arrays are live, not copies."""
        return {**self.weak.blocks(), **self.transfer.blocks()}

    def copy(self) -> "AnyShotModel":
        return copy.deepcopy(self)

    def weak_mean_logits(self, features) -> np.ndarray:
        return mean_refine_logits(np.asarray(features, dtype=np.float64), self.weak)

    def forward(self, features, options: TransferOptions | None = None) -> HeadOutputs:
        Z = np.asarray(features, dtype=np.float64)
        options = options or TransferOptions()
        return heads_forward(Z, self.weak_mean_logits(Z), self.transfer, self.s_lin, options, self.segment)

    # --- serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "feature_dim": self.feature_dim,
            "class_split": self.split.to_json(),
            "config": asdict(self.config),
            "lingual_similarity": {
                "shape": list(self.s_lin.shape),
                "values": [float(v) for v in self.s_lin.reshape(-1)],
            },
            "blocks": {
                name: {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
                for name, arr in self.blocks().items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnyShotModel":
        if obj.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {obj.get('format_version')!r}")
        split = ClassSplit.from_json(obj["class_split"])
        config = ModelConfig(**obj["config"])
        d = int(obj["feature_dim"])

        def arr(entry):
            return np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])

        blocks = {name: arr(e) for name, e in obj["blocks"].items()}
        weak = WeakDetectorParams(
            W_c=blocks["weak.cls.W"],
            b_c=blocks["weak.cls.b"],
            W_d=blocks["weak.det.W"],
            b_d=blocks["weak.det.b"],
            refine_W=[blocks[f"weak.refine{r}.W"] for r in range(config.num_refine)],
            refine_b=[blocks[f"weak.refine{r}.b"] for r in range(config.num_refine)],
        )
        transfer = TransferParams(
            **{name.replace(".", "_"): blocks[name] for name in blocks if not name.startswith("weak.")}
        )
        return cls(split, d, weak, transfer, arr(obj["lingual_similarity"]), config)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AnyShotModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
