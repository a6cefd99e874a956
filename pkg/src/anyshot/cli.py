"""Command-line interface.

Usage errors (unknown subcommand or flag) exit with status 2 via argparse;
violated contracts inside the library exit with status 1 and a message on
stderr. Every command that writes into a directory also writes the
effective configuration there as ``config.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import evaluate_model
from .experiments import (
    ResultTable,
    ablation_rows,
    budget_table,
    evaluate_variants,
    full_options,
    mean_similarity,
    train_base,
)
from .model import ModelConfig, AnyShotModel
from .similarity import softmax, write_matrix_csv
from .synthworld import Dataset, WorldConfig, generate_dataset, load_dataset, sample_kshot, save_dataset
from .training import TrainConfig, fine_tune, grad_check, randomize, write_loss_trace
from .transfer import ABLATION_VARIANTS, TaskDisabledError

log = logging.getLogger("anyshot")

DATASET_FILE = "dataset.json"
CONFIG_FILE = "config.json"
GRAD_TOLERANCE = 1e-5

_WORLD_KEYS = {f.name for f in dataclasses.fields(WorldConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_PATH_KEYS = {"data", "model", "out", "variant"}


@dataclass
class RunConfig:
    """World, training and model settings plus paths, from one flat JSON object."""

    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_flat(cls, obj: dict) -> "RunConfig":
        unknown = sorted(set(obj) - _WORLD_KEYS - _TRAIN_KEYS - _MODEL_KEYS - _PATH_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        world = WorldConfig.from_dict({k: v for k, v in obj.items() if k in _WORLD_KEYS})
        world.validate()
        train = TrainConfig.from_dict({k: v for k, v in obj.items() if k in _TRAIN_KEYS})
        model = ModelConfig(**{k: v for k, v in obj.items() if k in _MODEL_KEYS})
        # "seed" and "segment" are shared between the sections
        model.segment = train.segment
        paths = {k: v for k, v in obj.items() if k in _PATH_KEYS}
        return cls(world, train, model, paths)

    def to_flat(self) -> dict:
        out = {}
        out.update(dataclasses.asdict(self.world))
        out.update(dataclasses.asdict(self.train))
        out.update(dataclasses.asdict(self.model))
        out["lr_decay_points"] = list(self.train.lr_decay_points)
        out.update(self.paths)
        return out


def load_config(path, overrides: dict) -> RunConfig:
    """Read a JSON config (optional) and apply non-None CLI overrides."""
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ValueError(f"config {path} must hold a JSON object")
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_flat(obj)


def echo_config(cfg, out_dir: Path) -> None:
    """Write ``cfg`` (a RunConfig or a plain dict of settings) to ``out_dir/config.json``."""
    obj = cfg.to_flat() if isinstance(cfg, RunConfig) else cfg
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_FILE).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / DATASET_FILE
    if not p.is_file():
        raise FileNotFoundError(f"no dataset at {p}")
    return p


def _read_dataset(data: str) -> Dataset:
    return load_dataset(_dataset_path(data))


def _read_model(path: str) -> AnyShotModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no model at {path}")
    return AnyShotModel.load(path)


def _check_compatible(model: AnyShotModel, ds: Dataset) -> None:
    if model.split != ds.split:
        raise ValueError("model and dataset disagree on the class split")
    dim = ds.train[0].features.shape[1] if ds.train else ds.test[0].features.shape[1]
    if dim != model.feature_dim:
        raise ValueError(f"model expects {model.feature_dim}-d features, dataset has {dim}")


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# --- subcommands ---------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config, {"seed": args.seed})
    ds = generate_dataset(cfg.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / DATASET_FILE)
    echo_config(cfg, out)
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test images to {out / DATASET_FILE}")


def cmd_base_train(args) -> None:
    cfg = load_config(
        args.config,
        {
            "seed": args.seed,
            "base_iterations": args.iterations,
            "alpha": args.alpha,
            "learning_rate": args.learning_rate,
            "stop_gradient_weak": True if args.stop_gradient_weak else None,
            "segment": False if args.no_segment else None,
        },
    )
    ds = _read_dataset(args.data)
    model, trace = train_base(ds, cfg.train, cfg.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    write_loss_trace(_sibling(out, "_loss.csv"), trace)
    echo_config(dataclasses.replace(cfg, paths={**cfg.paths, "data": args.data, "out": args.out}), out.parent)
    print(f"base-trained {len(trace)} iterations, final loss {trace[-1].total:.4f}" if trace else "no iterations run")


def cmd_fine_tune(args) -> None:
    if args.k < 1:
        raise ValueError(
            "fine-tuning needs k >= 1; with k = 0 there are no novel instances, "
            "so evaluate the base-trained model directly (zero-shot): anyshot eval --model ..."
        )
    cfg = load_config(args.config, {"seed": args.seed, "k": args.k})
    ds = _read_dataset(args.data)
    model = _read_model(args.model)
    _check_compatible(model, ds)
    views = sample_kshot(ds.train, ds.split, args.k, cfg.train.seed)
    model, trace = fine_tune(model, views, cfg.train)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    write_loss_trace(_sibling(out, "_loss.csv"), trace)
    echo_config(dataclasses.replace(cfg, paths={**cfg.paths, "data": args.data, "model": args.model, "out": args.out}),
                out.parent)
    print(f"fine-tuned {model.finetune_steps} steps on {len(views)} images ({args.k}-shot)")


def _variant_options(name: str):
    if name == "full":
        # the direct heads are zero until fine-tuned, so including them is harmless
        return full_options(True)
    if name not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose full or one of {list(ABLATION_VARIANTS)}")
    return ABLATION_VARIANTS[name]


def cmd_eval(args) -> None:
    ds = _read_dataset(args.data)
    model = _read_model(args.model)
    _check_compatible(model, ds)
    segment = args.tasks == "det+seg"
    if segment and not model.segment:
        raise TaskDisabledError("model was trained without segmentation; use --tasks det")
    report = evaluate_model(model, ds.test, args.scope, segment=segment, options=_variant_options(args.variant))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    echo_config(
        {"data": args.data, "model": args.model, "out": args.out, "variant": args.variant,
         "scope": args.scope, "tasks": args.tasks},
        out,
    )
    for group in ("base", "novel") if args.scope == "all" else (args.scope,):
        print(f"{group}: AP50 {100 * report.aggregate(group, 'AP50'):.1f}  mAP {100 * report.aggregate(group, 'mAP'):.1f}")


def cmd_ablate(args) -> None:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown or not variants:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    cfg = load_config(args.config, {"seed": args.seed, "base_iterations": args.iterations})
    ds = _read_dataset(args.data)
    if args.model:
        model = _read_model(args.model)
        _check_compatible(model, ds)
    else:
        model, _ = train_base(ds, cfg.train, cfg.model)
    reports = evaluate_variants(model, ds.test, variants)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ResultTable(["seed", "variant", "AP50", "mAP", "maskAP50", "maskmAP"])
    ablation_rows(table, cfg.train.seed, reports)
    for name, rep in reports.items():
        slug = name.replace("+", "_")
        rep.write_csv(out / f"report_{slug}.csv")
        rep.write_json(out / f"report_{slug}.json")
    table.write_csv(out / "ablation.csv")
    echo_config(dataclasses.replace(cfg, paths={**cfg.paths, "data": args.data, "out": args.out}), out)
    for row in table.rows:
        print(f"{row[1]:18s} AP50 {row[2]:5.1f}  maskAP50 {row[4]:5.1f}")


def cmd_budget(args) -> None:
    fractions = [float(f) for f in args.weak_fraction.split(",") if f.strip()]
    if not fractions:
        raise ValueError("--weak-fraction needs at least one value")
    cfg = load_config(args.config, {"base_iterations": args.iterations})
    ds = _read_dataset(args.data)
    table = budget_table(range(args.seeds), args.budget, fractions, config=cfg.train, dataset=ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "budget.csv")
    echo_config(dataclasses.replace(cfg, paths={**cfg.paths, "data": args.data, "out": args.out}), out)
    med = table.medians("weak_fraction", "novel_AP50")
    for f in fractions:
        print(f"weak_fraction {f:.2f}: median novel AP50 {med[f]:.1f} over {args.seeds} seeds")


def cmd_export_similarity(args) -> None:
    ds = _read_dataset(args.data)
    model = _read_model(args.model)
    _check_compatible(model, ds)
    s_lin = model.s_lin
    if args.normalize == "row":
        # raw dot products can be negative, so rows are normalized with a softmax
        s_lin = softmax(s_lin, axis=1)
    s_mean = mean_similarity(model, ds.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    novel = [model.split.classes[i] for i in model.split.novel_ids]
    base = [model.split.classes[i] for i in model.split.base_ids]
    write_matrix_csv(out / "similarity_lingual.csv", s_lin, novel, base)
    write_matrix_csv(out / "similarity_mean.csv", s_mean, novel, base)
    echo_config({"data": args.data, "model": args.model, "out": args.out, "normalize": args.normalize}, out)
    print(f"wrote {len(novel)}x{len(base)} similarity matrices to {out}")


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    ds = _read_dataset(args.data)
    if len(ds.train) < args.images:
        raise ValueError(f"dataset has {len(ds.train)} train images, grad-check needs {args.images}")
    rng = np.random.default_rng([cfg.train.seed, 0x6C])
    records = [ds.train[i] for i in sorted(rng.choice(len(ds.train), size=args.images, replace=False))]
    dim = records[0].features.shape[1]
    model = AnyShotModel.initialize(ds.split, ds.embeddings, dim, cfg.model, seed=cfg.train.seed)
    randomize(model, seed=cfg.train.seed)
    report = grad_check(model, records, cfg.train, step=args.step, seed=cfg.train.seed,
                        max_entries_per_block=args.max_entries or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {
        "max_relative_error": report.max_relative_error,
        "worst_parameter": report.worst_parameter,
        "entries_checked": report.entries_checked,
        "tolerance": args.tolerance,
        "per_block": report.per_block,
    }
    (out / "grad_check.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    echo_config(dataclasses.replace(cfg, paths={**cfg.paths, "data": args.data, "out": args.out}), out)
    ok = report.max_relative_error < args.tolerance
    print(f"max relative error {report.max_relative_error:.3e} at {report.worst_parameter} "
          f"({report.entries_checked} entries): {'ok' if ok else 'ABOVE TOLERANCE'}")
    return 0 if ok else 1


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyshot", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("base-train", help="train the weak detector and base heads")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--stop-gradient-weak", action="store_true")
    p.add_argument("--no-segment", action="store_true")
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_base_train)

    p = sub.add_parser("fine-tune", help="k-shot fine-tuning of the novel direct heads")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("eval", help="evaluate a model on the test images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scope", choices=["base", "novel", "all"], default="all")
    p.add_argument("--tasks", choices=["det", "det+seg"], default="det+seg")
    p.add_argument("--variant", default="full")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="novel AP for each transfer variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--model", help="base-trained model; trained from --data when omitted")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("budget", help="novel AP50 against the annotation budget split")
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--weak-fraction", default="0,0.5,1", help="comma separated fractions")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("export-similarity", help="write lingual and mean per-proposal similarity matrices")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalize", choices=["none", "row"], default="none")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_similarity)

    p = sub.add_parser("grad-check", help="compare analytic gradients with finite differences")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--images", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    p.add_argument("--max-entries", type=int, default=300, help="entries sampled per block, 0 for all")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                code = args.func(args)
        else:
            code = args.func(args)
    except (ValueError, KeyError, FileNotFoundError, TaskDisabledError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"anyshot: error: {msg}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
