"""Command-line entry point.

Subcommands wire the library into reproducible runs:

* ``gen-data``  — write a synthetic dataset (images, densities,
  fixations, manifest) to a directory.
* ``train``     — train on an on-disk dataset fold; emits ``log.csv``
  and ``model.best`` (or per-member checkpoints with ``--ensemble``).
* ``predict``   — run a checkpoint over image files; emits raw PFM
  maps, 8-bit previews and a gate-probability CSV.
* ``eval``      — score a checkpoint or a directory of maps against a
  dataset; emits per-sample and aggregate CSVs.
* ``gradcheck`` — verify analytic gradients of the full training loss
  on a miniature model against central finite differences.

Every command is a pure function of (config file, seed, input files):
reruns produce byte-identical outputs except for ``run.meta``, which is
the one file allowed to carry timestamps. Exit codes: 0 success, 1
check failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, netpbm
from . import autodiff as ad
from .dataset import (
    DatasetSpec,
    generate,
    load_dataset,
    save_dataset,
    split_folds,
)
from .errors import ConfigurationError, FormatError, UsageError
from .metrics import DEFAULT_AUC_SPLITS, KNOWN_METRICS, evaluate
from .model import (
    MixtureModel,
    ModelConfig,
    PoolSpec,
    StageSpec,
    build_model,
    desk_scale,
    layer_census,
    one_hot,
    paper_scale,
    total_loss,
)
from .optim import TrainConfig, ensemble_predict, train, train_ensemble

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2

GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_EPSILONS = (1e-3, 1e-4, 1e-5)


@dataclass
class MetricsConfig:
    names: tuple[str, ...] = KNOWN_METRICS
    seed: int = 0
    auc_splits: int = DEFAULT_AUC_SPLITS

    @staticmethod
    def from_json_dict(doc: dict) -> "MetricsConfig":
        doc = dict(doc)
        unknown = set(doc) - {"names", "seed", "auc_splits"}
        if unknown:
            raise ConfigurationError(f"unknown metrics config keys: {sorted(unknown)}")
        if "names" in doc:
            doc["names"] = tuple(doc["names"])
        return MetricsConfig(**doc)

    def to_json_dict(self) -> dict:
        return {
            "names": list(self.names),
            "seed": self.seed,
            "auc_splits": self.auc_splits,
        }


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DatasetSpec
    data_root: str | None
    metrics: MetricsConfig
    output_dir: str | None

    def to_json_dict(self) -> dict:
        data = {"root": self.data_root} if self.data_root else self.data.to_json_dict()
        return {
            "model": self.model.to_json_dict(),
            "train": self.train.to_json_dict(),
            "data": data,
            "metrics": self.metrics.to_json_dict(),
            "output_dir": self.output_dir,
        }


def load_run_config(path: str | None, seed: int | None = None) -> RunConfig:
    """Resolve a config file over the built-in defaults.

    Section keys replace the matching default wholesale; unknown keys
    anywhere are rejected so typos cannot silently fall back to a
    default. A ``seed`` override rewrites every per-section seed.
    """
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}")
    unknown = set(doc) - {"model", "train", "data", "metrics", "output_dir"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")

    model_doc = desk_scale().to_json_dict()
    overrides = doc.get("model", {})
    if set(overrides) - set(model_doc):
        raise ConfigurationError(
            f"unknown model config keys: {sorted(set(overrides) - set(model_doc))}"
        )
    model_doc.update(overrides)
    model = ModelConfig.from_json_dict(model_doc)

    train_doc = TrainConfig().to_json_dict()
    overrides = doc.get("train", {})
    if set(overrides) - set(train_doc):
        raise ConfigurationError(
            f"unknown train config keys: {sorted(set(overrides) - set(train_doc))}"
        )
    train_doc.update(overrides)
    train_cfg = TrainConfig.from_json_dict(train_doc)

    data_doc = doc.get("data", {})
    data_root = None
    if "root" in data_doc:
        extra = set(data_doc) - {"root"}
        if extra:
            raise ConfigurationError(
                f"data section with 'root' cannot also set {sorted(extra)}"
            )
        data_root = str(data_doc["root"])
        data_spec = DatasetSpec()
    else:
        spec_doc = DatasetSpec().to_json_dict()
        if set(data_doc) - set(spec_doc):
            raise ConfigurationError(
                f"unknown dataset spec keys: {sorted(set(data_doc) - set(spec_doc))}"
            )
        spec_doc.update(data_doc)
        data_spec = DatasetSpec.from_json_dict(spec_doc)

    metrics_cfg = MetricsConfig.from_json_dict(doc.get("metrics", {}))
    output_dir = doc.get("output_dir")

    if seed is not None:
        data_spec = replace(data_spec, seed=seed)
        train_cfg = replace(train_cfg, seed=seed)
        metrics_cfg = replace(metrics_cfg, seed=seed)

    return RunConfig(
        model=model,
        train=train_cfg,
        data=data_spec,
        data_root=data_root,
        metrics=metrics_cfg,
        output_dir=output_dir,
    )


def _resolve_out(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigurationError("an output directory is required (--out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run_records(out: Path, cfg: RunConfig) -> None:
    (out / "resolved.json").write_text(
        json.dumps(cfg.to_json_dict(), sort_keys=True, indent=2) + "\n"
    )
    # timestamps live here and only here; everything else is rerun-stable
    (out / "run.meta").write_text(
        f"version={__version__}\nstarted={time.strftime('%Y-%m-%dT%H:%M:%S%z')}\n"
    )


def _load_samples(root: str):
    path = Path(root)
    if not path.exists():
        raise ConfigurationError(f"dataset root {root} does not exist")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    if cfg.data_root is not None:
        raise ConfigurationError(
            "gen-data needs a dataset spec in the config, not a 'root' path"
        )
    out = _resolve_out(args, cfg)
    samples = generate(cfg.data)
    save_dataset(out, samples, cfg.data)
    _write_run_records(out, cfg)
    print(f"wrote {len(samples)} samples across {cfg.data.num_categories} "
          f"categories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    root = args.data or cfg.data_root
    if not root:
        raise ConfigurationError("train needs a dataset (--data or data.root)")
    samples, _spec = _load_samples(root)
    out = _resolve_out(args, cfg)

    model_cfg = cfg.model
    if args.single_expert:
        # one expert has nothing to classify; a one-class cross entropy is
        # identically zero, forcing the weight keeps the loss log honest
        model_cfg = replace(model_cfg, num_experts=1, lambda_c=0.0)
    train_cfg = cfg.train
    if args.freeze_gating:
        train_cfg = replace(train_cfg, freeze_gating=True)

    folds = split_folds(samples, args.folds, seed=train_cfg.seed)
    fold = folds[args.fold]
    train_set = [samples[i] for i in fold.train]
    val_set = [samples[i] for i in fold.val]

    cfg = replace(cfg, model=model_cfg, train=train_cfg)
    _write_run_records(out, cfg)

    if args.ensemble:
        members = train_ensemble(
            model_cfg, train_set, val_set, n_members=args.ensemble,
            subsample=args.subsample, seed=train_cfg.seed, train_cfg=train_cfg,
        )
        for i, (model, result) in enumerate(members):
            model.save(out / f"model.member{i}.best")
            result.write_log_csv(out / f"log.member{i}.csv")
        print(f"trained {len(members)} ensemble members into {out}")
        return EXIT_OK

    model = build_model(model_cfg, seed=train_cfg.seed)
    result = train(model, train_set, val_set, train_cfg)
    model.save(out / "model.best")
    result.write_log_csv(out / "log.csv")
    print(
        f"trained {len(result.log_rows)} epochs (best epoch {result.best_epoch}, "
        f"val loss {result.best_val_loss:.6f}, stopped: {result.stopped})"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    model = MixtureModel.load(args.checkpoint)
    cfg = model.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gate_rows = []
    for image_path in args.images:
        image = netpbm.read_image_pgm(image_path)
        if image.shape != (cfg.input_channels, cfg.input_h, cfg.input_w):
            raise ConfigurationError(
                f"{image_path}: image shape {image.shape} does not match the "
                f"checkpoint's ({cfg.input_channels}, {cfg.input_h}, {cfg.input_w})"
            )
        saliency = model.predict(image[None])[0]
        gates = model.predict_gates(image[None])[0]
        stem = Path(image_path).stem.removesuffix(".img")
        netpbm.write_density_pfm(out / f"{stem}.sal.pfm", saliency[None])
        netpbm.write_preview_pgm(out / f"{stem}.preview.pgm", saliency)
        gate_rows.append((stem, gates))
    lines = ["image," + ",".join(f"gate{k}" for k in range(cfg.num_experts))]
    for stem, gates in gate_rows:
        lines.append(stem + "," + ",".join(repr(float(g)) for g in gates))
    (out / "gates.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(gate_rows)} saliency maps to {out}")
    return EXIT_OK


def _maps_from_dir(map_dir: str, samples) -> dict[str, np.ndarray]:
    maps = {}
    root = Path(map_dir)
    for sample in samples:
        for name in (f"{sample.sample_id}.sal.pfm", f"{sample.sample_id}.pfm"):
            candidate = root / name
            if candidate.exists():
                maps[sample.sample_id] = netpbm.read_density_pfm(candidate)[0]
                break
    return maps


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    root = args.data or cfg.data_root
    if not root:
        raise ConfigurationError("eval needs a dataset (--data or data.root)")
    samples, _spec = _load_samples(root)
    if args.fold is not None:
        fold = split_folds(samples, args.folds, seed=cfg.train.seed)[args.fold]
        samples = [samples[i] for i in fold.test]

    metric_names = (
        tuple(args.metrics.split(",")) if args.metrics else cfg.metrics.names
    )

    if args.checkpoint:
        model = MixtureModel.load(args.checkpoint)

        def predictions(sample):
            if sample.image.shape[1:] != (model.config.input_h, model.config.input_w):
                raise ConfigurationError(
                    f"sample {sample.sample_id} extent {sample.image.shape[1:]} "
                    "does not match the checkpoint"
                )
            return model.predict(sample.image[None])[0]

    elif args.maps:
        predictions = _maps_from_dir(args.maps, samples)
        if not predictions:
            raise ConfigurationError(
                f"no prediction maps under {args.maps} overlap the dataset"
            )
    else:
        raise ConfigurationError("eval needs --checkpoint or --maps")

    report = evaluate(
        predictions, samples, metric_names,
        seed=cfg.metrics.seed, n_splits=cfg.metrics.auc_splits,
    )
    out = _resolve_out(args, cfg)
    _write_run_records(out, cfg)
    report.write_per_sample_csv(out / "per_sample.csv")
    report.write_aggregate_csv(out / "aggregates.csv")

    print(f"{'category':<12}" + "".join(f"{m:>11}" for m in metric_names))
    by_cat: dict[str, dict[str, float]] = {}
    for category, metric, mean_value, _n in report.aggregates():
        by_cat.setdefault(category, {})[metric] = mean_value
    for category in sorted(by_cat):
        if category == "overall":
            continue
        row = by_cat[category]
        print(f"{category:<12}" + "".join(f"{row.get(m, float('nan')):>11.4f}"
                                          for m in metric_names))
    overall = by_cat.get("overall", {})
    print(f"{'overall':<12}" + "".join(f"{overall.get(m, float('nan')):>11.4f}"
                                       for m in metric_names))
    if report.missing:
        print(f"missing predictions for {len(report.missing)} samples "
              f"(excluded from aggregates)", file=sys.stderr)
    return EXIT_OK


def miniature_config() -> ModelConfig:
    """Smallest config that still exercises every loss term."""
    return replace(
        desk_scale(num_experts=2),
        input_h=16,
        input_w=16,
        cb_w=2,
        cb_h=2,
        trunk_stages=(
            StageSpec(convs=(3,), pool=PoolSpec(2, 2)),
            StageSpec(convs=(4,), pool=None),
        ),
        expert_conv1_filters=3,
        gating_convs=(3, 4),
        gating_hidden=6,
    )


def _corrupting_relu(original):
    def wrapped(a):
        out = original(a)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: tuple(
                None if piece is None else piece * 1.01 for piece in inner(g)
            )
        return out

    return wrapped


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    model_cfg = miniature_config() if args.config is None else cfg.model
    seed = args.seed if args.seed is not None else 0
    model = build_model(model_cfg, seed=seed)

    # nudge every parameter off its symmetric init so all loss paths and
    # the center-bias regularizer carry gradient
    noise = np.random.default_rng([seed, 0xC0FFEE])
    for p in model.parameters():
        p.data = p.data + noise.normal(0.0, 0.05, size=p.shape)

    rng = np.random.default_rng([seed, 99])
    n = 2
    x = rng.uniform(0.0, 1.0, size=(n, model_cfg.input_channels,
                                    model_cfg.input_h, model_cfg.input_w))
    out_h, out_w = model_cfg.output_shape()
    y = rng.uniform(0.0, 1.0, size=(n, 1, out_h, out_w))
    y /= y.max(axis=(2, 3), keepdims=True)
    targets = one_hot(rng.integers(0, model_cfg.num_experts, size=n),
                      model_cfg.num_experts)

    def loss_fn():
        return total_loss(model.forward(x), y, targets, model_cfg)

    original_relu = ad.relu
    if args.corrupt:
        ad.relu = _corrupting_relu(original_relu)
    try:
        worst_overall = 0.0
        headline = None
        for eps in GRADCHECK_EPSILONS:
            report = ad.grad_check(loss_fn, model.parameters(), epsilon=eps)
            print(f"epsilon {eps:g}: max relative error {report.max_rel_err:.3e}")
            if eps == 1e-4:
                headline = report
        groups: dict[str, float] = {}
        for entry in headline.entries:
            group = entry.name.split(".")[0]
            groups[group] = max(groups.get(group, 0.0), entry.max_rel_err)
        for group in sorted(groups):
            print(f"  {group:<14} worst rel err {groups[group]:.3e}")
        worst_overall = headline.max_rel_err
    finally:
        ad.relu = original_relu

    if worst_overall > GRADCHECK_TOLERANCE:
        print(
            f"FAIL: max relative error {worst_overall:.3e} exceeds "
            f"{GRADCHECK_TOLERANCE:g} at epsilon 1e-4"
        )
        return EXIT_CHECK_FAILED
    print(f"OK: max relative error {worst_overall:.3e} <= {GRADCHECK_TOLERANCE:g}")
    return EXIT_OK


def cmd_census(args) -> int:
    config = paper_scale() if args.preset == "paper" else desk_scale()
    print("\n".join(layer_census(config)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moes",
        description="Mixture-of-experts saliency: generate data, train, "
                    "predict, evaluate, and verify gradients.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override every section seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on an on-disk dataset fold")
    common(p)
    p.add_argument("--data", help="dataset root (overrides config data.root)")
    p.add_argument("--fold", type=int, default=0, help="fold index (default 0)")
    p.add_argument("--folds", type=int, default=5, help="fold count (default 5)")
    p.add_argument("--single-expert", action="store_true",
                   help="K=1 ablation baseline; forces the class weight to 0")
    p.add_argument("--ensemble", type=int, metavar="N",
                   help="train N members on random subsamples instead")
    p.add_argument("--subsample", type=float, default=0.8,
                   help="ensemble member training fraction (default 0.8)")
    p.add_argument("--freeze-gating", action="store_true",
                   help="skip optimizer updates for gating parameters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a checkpoint or map directory")
    common(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--checkpoint", help="model checkpoint to score")
    p.add_argument("--maps", help="directory of PFM prediction maps")
    p.add_argument("--metrics", help="comma-separated metric names")
    p.add_argument("--fold", type=int, help="restrict to this fold's test split")
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p)
    p.add_argument("--corrupt", action="store_true",
                   help="test hook: deliberately corrupt a backward rule")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("census", help="print a config's layer table")
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.set_defaults(func=cmd_census)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("MOES_THREADS")
    if threads is not None and not threads.isdigit():
        print(f"ignoring invalid MOES_THREADS={threads!r}", file=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
