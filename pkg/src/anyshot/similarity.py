"""Lingual and visual similarity between novel and base classes.

The lingual part is a dot product of label embeddings, fixed for the
whole run. The visual part is the weak detector's belief, per proposal,
restricted to base classes. The two are multiplied entry-wise and
row-softmaxed to give one stochastic row of base weights per novel class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASE_MASS_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassSplit:
    """Ordered base and novel class names.

    The global class index used everywhere else is the position in
    ``classes``: base classes first, then novel classes.
    """

    base: tuple[str, ...]
    novel: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(self.base))
        object.__setattr__(self, "novel", tuple(self.novel))
        if not self.base or not self.novel:
            raise ValueError("both base and novel class sets must be non-empty")
        if len(set(self.classes)) != len(self.classes):
            overlap = sorted(set(self.base) & set(self.novel))
            if overlap:
                raise ValueError(f"base and novel classes overlap: {overlap}")
            raise ValueError("class names must be unique")

    @property
    def classes(self) -> tuple[str, ...]:
        return self.base + self.novel

    @property
    def num_base(self) -> int:
        return len(self.base)

    @property
    def num_novel(self) -> int:
        return len(self.novel)

    @property
    def num_classes(self) -> int:
        return len(self.base) + len(self.novel)

    @property
    def base_ids(self) -> np.ndarray:
        return np.arange(self.num_base)

    @property
    def novel_ids(self) -> np.ndarray:
        return np.arange(self.num_base, self.num_classes)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def is_novel(self, class_id: int) -> bool:
        return class_id >= self.num_base

    def to_json(self) -> dict:
        return {"base": list(self.base), "novel": list(self.novel)}

    @classmethod
    def from_json(cls, obj: dict) -> "ClassSplit":
        return cls(tuple(obj["base"]), tuple(obj["novel"]))


class EmbeddingTable(dict):
    """Token -> vector map with a single shared dimension."""

    def __init__(self, entries=None):
        super().__init__()
        self.dim: int | None = None
        for token, vec in (entries or {}).items():
            self[token] = vec

    def __setitem__(self, token: str, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if self.dim is None:
            self.dim = vec.shape[0]
        elif vec.shape[0] != self.dim:
            raise ValueError(f"embedding for {token!r} has dim {vec.shape[0]}, table uses {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"embedding for {token!r} has non-finite entries")
        super().__setitem__(token, vec)

    def to_json(self) -> dict:
        return {token: [float(v) for v in vec] for token, vec in self.items()}


def load_embeddings(path) -> EmbeddingTable:
    """Read a GloVe-format text file: ``<token> <floats...>`` per line, no header."""
    table = EmbeddingTable()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or not parts[0]:
                if line.strip():
                    raise ValueError(f"{path}:{lineno}: malformed embedding line")
                continue
            try:
                table[parts[0]] = [float(v) for v in parts[1:]]
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return table


def save_embeddings(table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for token, vec in table.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def embed_label(name: str, table: EmbeddingTable) -> np.ndarray:
    """Mean embedding of the whitespace-separated tokens of ``name``."""
    tokens = name.split()
    if not tokens:
        raise KeyError("empty class name")
    for tok in tokens:
        if tok not in table:
            raise KeyError(f"token {tok!r} of class {name!r} not in embedding table")
    return np.mean([table[tok] for tok in tokens], axis=0)


def lingual_matrix(split: ClassSplit, table: EmbeddingTable, normalize: bool = False) -> np.ndarray:
    """(num_novel, num_base) matrix of label-embedding dot products.

    With ``normalize`` the embeddings are scaled to unit length first, i.e.
    cosine similarity.
    """
    g_novel = np.stack([embed_label(n, table) for n in split.novel])
    g_base = np.stack([embed_label(b, table) for b in split.base])
    if normalize:
        g_novel = g_novel / np.linalg.norm(g_novel, axis=1, keepdims=True)
        g_base = g_base / np.linalg.norm(g_base, axis=1, keepdims=True)
    return g_novel @ g_base.T


def visual_vector(weak_probs, split: ClassSplit) -> np.ndarray:
    """Renormalized base-class part of the weak class probabilities.

    Accepts any leading shape ``(..., num_classes)``. Rows whose base mass
    falls under ``BASE_MASS_FLOOR`` become uniform.
    """
    probs = np.asarray(weak_probs, dtype=np.float64)
    base = probs[..., : split.num_base]
    mass = base.sum(axis=-1, keepdims=True)
    uniform = np.full_like(base, 1.0 / split.num_base)
    safe = np.where(mass < BASE_MASS_FLOOR, 1.0, mass)
    return np.where(mass < BASE_MASS_FLOOR, uniform, base / safe)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def combine_similarity(s_lin, s_vis) -> np.ndarray:
    """Row-softmax of ``s_lin`` scaled column-wise by ``s_vis``.

    Args:
        s_lin: (num_novel, num_base).
        s_vis: (..., num_base), one vector per proposal.

    Returns:
        (..., num_novel, num_base), every row summing to one.
    """
    s_lin = np.asarray(s_lin, dtype=np.float64)
    s_vis = np.asarray(s_vis, dtype=np.float64)
    if s_lin.shape[-1] != s_vis.shape[-1]:
        raise ValueError(f"s_lin has {s_lin.shape[-1]} base columns, s_vis has {s_vis.shape[-1]}")
    return softmax(s_lin * s_vis[..., None, :], axis=-1)


def write_matrix_csv(path, matrix, row_names, col_names, corner: str = "novel") -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([corner, *col_names])
        for name, row in zip(row_names, matrix):
            writer.writerow([name, *(repr(float(v)) for v in row)])


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    with open(Path(path), encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, cols, values
