"""Experiment harnesses: ablation ladder, any-shot sweep, annotation budget.

Each harness returns a :class:`ResultTable` with one row per (seed, setting)
so callers can take medians over seeds or write the rows out as CSV.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import EvalReport, evaluate_model
from .model import ModelConfig, AnyShotModel
from .synthworld import Dataset, WorldConfig, budget_allocate, generate_dataset, sample_kshot
from .training import TrainConfig, base_train, fine_tune
from .transfer import ABLATION_VARIANTS, TransferOptions, similarity_for

FULL_TRANSFER = ABLATION_VARIANTS["lin+vis+reg+seg"]
METRICS = ("AP50", "mAP", "maskAP50", "maskmAP")


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, **values) -> None:
        missing = set(self.columns) - set(values)
        if missing:
            raise ValueError(f"row is missing columns {sorted(missing)}")
        self.rows.append([values[c] for c in self.columns])

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def medians(self, key: str, metric: str) -> dict:
        """Median of ``metric`` over rows sharing each value of ``key``, NaNs ignored."""
        groups: dict = {}
        for k, v in zip(self.column(key), self.column(metric)):
            groups.setdefault(k, []).append(v)
        out = {}
        for k, vals in groups.items():
            vals = [v for v in vals if not math.isnan(v)]
            out[k] = float(np.median(vals)) if vals else math.nan
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def full_options(fine_tuned: bool) -> TransferOptions:
    """Every transfer term, plus the direct heads once they have been trained."""
    return dataclasses.replace(FULL_TRANSFER, include_direct=fine_tuned)


def train_base(dataset: Dataset, config: TrainConfig | None = None, model_config: ModelConfig | None = None):
    """Fresh model base-trained on ``dataset.train``.

    Returns:
        (model, loss trace)
    """
    config = config or TrainConfig()
    model_config = model_config or ModelConfig(segment=config.segment)
    dim = dataset.train[0].features.shape[1]
    model = AnyShotModel.initialize(dataset.split, dataset.embeddings, dim, model_config, seed=config.seed)
    return base_train(model, dataset.train, config)


def evaluate_variants(model: AnyShotModel, records, variants=tuple(ABLATION_VARIANTS)) -> dict[str, EvalReport]:
    """Novel-class report for each named ablation variant."""
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    return {v: evaluate_model(model, records, "novel", options=ABLATION_VARIANTS[v]) for v in variants}


def _metric_row(report: EvalReport, group: str) -> dict[str, float]:
    return {m: 100.0 * report.aggregate(group, m) for m in METRICS}


def ablation_rows(table: ResultTable, seed: int, reports: dict[str, EvalReport]) -> None:
    for variant, rep in reports.items():
        table.add(seed=seed, variant=variant, **_metric_row(rep, "novel"))


def ablation_table(seeds, world: WorldConfig | None = None, config: TrainConfig | None = None,
                   variants=tuple(ABLATION_VARIANTS)) -> ResultTable:
    """Novel AP per variant, one base-trained model per seed (world seeded too)."""
    world = world or WorldConfig()
    config = config or TrainConfig()
    table = ResultTable(["seed", "variant", *METRICS])
    for seed in seeds:
        ds = generate_dataset(dataclasses.replace(world, seed=seed))
        model, _ = train_base(ds, dataclasses.replace(config, seed=seed))
        ablation_rows(table, seed, evaluate_variants(model, ds.test, variants))
    return table


def anyshot_report(base_model: AnyShotModel, dataset: Dataset, k: int, config: TrainConfig) -> EvalReport:
    """Evaluate all classes after ``k``-shot fine-tuning of a copy of ``base_model``.

    ``k = 0`` evaluates the base-trained model directly.
    """
    model = base_model.copy()
    if k > 0:
        views = sample_kshot(dataset.train, dataset.split, k, config.seed)
        model, _ = fine_tune(model, views, dataclasses.replace(config, k=k))
    return evaluate_model(model, dataset.test, "all", options=full_options(k > 0))


def anyshot_rows(table: ResultTable, seed: int, base_model: AnyShotModel, dataset: Dataset, ks, config: TrainConfig):
    for k in ks:
        rep = anyshot_report(base_model, dataset, k, config)
        table.add(
            seed=seed,
            k=k,
            novel_AP50=100.0 * rep.aggregate("novel", "AP50"),
            base_AP50=100.0 * rep.aggregate("base", "AP50"),
            novel_maskAP50=100.0 * rep.aggregate("novel", "maskAP50"),
        )


ANYSHOT_COLUMNS = ["seed", "k", "novel_AP50", "base_AP50", "novel_maskAP50"]


def anyshot_table(seeds, ks=(0, 5, 10), world: WorldConfig | None = None,
                  config: TrainConfig | None = None) -> ResultTable:
    world = world or WorldConfig()
    config = config or TrainConfig()
    table = ResultTable(list(ANYSHOT_COLUMNS))
    for seed in seeds:
        ds = generate_dataset(dataclasses.replace(world, seed=seed))
        cfg = dataclasses.replace(config, seed=seed)
        model, _ = train_base(ds, cfg)
        anyshot_rows(table, seed, model, ds, ks, cfg)
    return table


BUDGET_COLUMNS = ["seed", "budget", "weak_fraction", "k", "weak_images", "novel_AP50", "novel_maskAP50"]


def budget_trial(dataset: Dataset, budget: int, weak_fraction: float, config: TrainConfig) -> tuple:
    """Train and evaluate one budget allocation.

    Returns:
        (BudgetAllocation, novel EvalReport)
    """
    alloc = budget_allocate(dataset.train, dataset.split, budget, weak_fraction, config.seed)
    cfg = dataclasses.replace(config, k=alloc.k)
    model, _ = train_base(dataclasses.replace(dataset, train=alloc.train), cfg)
    if alloc.k > 0:
        model, _ = fine_tune(model, alloc.shots, cfg)
    return alloc, evaluate_model(model, dataset.test, "novel", options=full_options(alloc.k > 0))


def budget_table(seeds, budget: int = 10, fractions=(0.0, 0.5, 1.0), world: WorldConfig | None = None,
                 config: TrainConfig | None = None, dataset: Dataset | None = None) -> ResultTable:
    """Novel AP per allocation. A fixed ``dataset`` is reused across seeds, else one world per seed."""
    world = world or WorldConfig()
    config = config or TrainConfig()
    table = ResultTable(list(BUDGET_COLUMNS))
    for seed in seeds:
        ds = dataset if dataset is not None else generate_dataset(dataclasses.replace(world, seed=seed))
        for f in fractions:
            alloc, rep = budget_trial(ds, budget, f, dataclasses.replace(config, seed=seed))
            table.add(
                seed=seed,
                budget=budget,
                weak_fraction=float(f),
                k=alloc.k,
                weak_images=len(alloc.weak_image_ids),
                novel_AP50=100.0 * rep.aggregate("novel", "AP50"),
                novel_maskAP50=100.0 * rep.aggregate("novel", "maskAP50"),
            )
    return table


def mean_similarity(model: AnyShotModel, records, options: TransferOptions | None = None) -> np.ndarray:
    """Average per-proposal similarity ``S(z)`` over every proposal in ``records``."""
    options = options or FULL_TRANSFER
    total = np.zeros((model.split.num_novel, model.split.num_base))
    count = 0
    for r in records:
        weak = model.weak_mean_logits(r.features)
        S = similarity_for(options, model.s_lin, weak[:, 1:], model.split.num_base)
        total += S.sum(axis=0)
        count += S.shape[0]
    if count == 0:
        raise ValueError("no proposals to average over")
    return total / count
