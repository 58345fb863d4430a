"""Command-line entry point: ``hybridnet {train,crossval,eval,saliency}``.

Exit codes: 0 success, 2 configuration or data errors, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig, resolve
from .data import (
    AugmentSpec,
    DatasetError,
    DatasetIndex,
    PreprocessSpec,
    load_resized,
    load_split_file,
    normalize,
    scan_dataset,
    stratified_holdout,
    stratified_kfold,
    to_unit,
)
from .metrics import aggregate, write_report
from .model import HybridConfig, NonFiniteLossError, PlateauState
from .saliency import compute_saliency, render_panels, save_panels
from .synthetic import make_shapes_dataset
from .training import crossval, evaluate_model, fit, new_state

logger = logging.getLogger("hybridnet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--train-split", dest="train_split")
    p.add_argument("--test-split", dest="test_split")
    p.add_argument("--profile", choices=["gastrovision", "kvasir-capsule", "desk", "custom"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--preset", choices=["tiny", "desk"])
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the train split and write checkpoints")
    _shared(p)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    _shared(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--cv-scope", dest="cv_scope", choices=["full", "train"])

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--train-split", dest="train_split")
    p.add_argument("--test-split", dest="test_split")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", default="eval")

    p = sub.add_parser("saliency", help="write saliency panels for images")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class-id", dest="class_id", type=int)
    p.add_argument("--mask-quantile", dest="mask_quantile", type=float, default=0.15)
    p.add_argument("--out", default="saliency")

    p = sub.add_parser("make-synthetic", help="write a colored-shapes image folder")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", dest="per_class", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


_RUN_KEYS = ("data_root", "train_split", "test_split", "profile", "seed", "out", "preset",
             "image_size", "lr", "batch", "epochs", "optimizer", "augment", "folds", "cv_scope")


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in _RUN_KEYS}
    return resolve(args.config, overrides)


def _load_data(cfg: RunConfig) -> tuple[DatasetIndex, DatasetIndex | None]:
    """Scanned root (whole set) or the two split files."""
    if cfg.uses_splits:
        root = cfg.data_root or str(Path(cfg.train_split).parent)
        return load_split_file(cfg.train_split, cfg.test_split, root)
    return scan_dataset(cfg.data_root), None


def _model_cfg(cfg: RunConfig, num_classes: int, seed: int) -> HybridConfig:
    return HybridConfig.preset(cfg.preset, num_classes, seed, cfg.image_size)


def _plateau(cfg: RunConfig) -> PlateauState:
    return PlateauState(factor=cfg.factor, patience=cfg.patience, min_delta=cfg.min_delta,
                        min_lr=cfg.min_lr)


def _augment(cfg: RunConfig, seed: int) -> AugmentSpec | None:
    return AugmentSpec(seed=seed) if cfg.augment else None


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def cmd_train(args) -> int:
    cfg = _run_config(args)
    index, test = _load_data(cfg)
    if test is None:
        train, test = stratified_holdout(index, 0.8, cfg.seed)
    else:
        train = index
    out = _prepare_out(cfg)
    spec = PreprocessSpec(cfg.image_size)
    state = new_state(_model_cfg(cfg, len(train.label_names), cfg.seed), cfg.lr,
                      cfg.optimizer, _plateau(cfg))
    labels = train.label_names
    fit(state, train, test, cfg.epochs, cfg.batch, spec, cfg.seed, _augment(cfg, cfg.seed),
        log_path=out / "epochs.csv",
        on_best=lambda s: checkpoint_save(s, out / "best.hybk", labels))
    checkpoint_save(state, out / "final.hybk", labels)
    if not (out / "best.hybk").exists():
        checkpoint_save(state, out / "best.hybk", labels)
    print(f"wrote {out / 'final.hybk'}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _run_config(args)
    index, test = _load_data(cfg)
    if cfg.cv_scope == "train":
        if test is None:
            index, _ = stratified_holdout(index, 0.8, cfg.seed)
    elif test is not None:
        index = DatasetIndex(index.root, index.samples + test.samples, index.label_names)
    folds = stratified_kfold(index, cfg.folds, cfg.seed)
    out = _prepare_out(cfg)
    report = crossval(
        index, folds,
        make_cfg=lambda seed: _model_cfg(cfg, len(index.label_names), seed),
        lr=cfg.lr, optimizer=cfg.optimizer, epochs=cfg.epochs, batch_size=cfg.batch,
        spec=PreprocessSpec(cfg.image_size), master_seed=cfg.seed,
        augment_spec=lambda seed: _augment(cfg, seed), out_dir=out,
        plateau=lambda: _plateau(cfg),
    )
    write_report(report, out / "report.csv")
    m, s = report.mean, report.sd
    print(f"MCC {m['mcc']:.4f} ± {s['mcc']:.4f}  accuracy {m['accuracy']:.4f} ± {s['accuracy']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, labels = checkpoint_load(args.checkpoint)
    if args.test_split is not None:
        if args.train_split is None:
            raise ConfigError("--test-split needs --train-split for the shared label table")
        root = args.data_root or str(Path(args.train_split).parent)
        _, index = load_split_file(args.train_split, args.test_split, root)
    elif args.data_root is not None:
        index = scan_dataset(args.data_root)
    else:
        raise ConfigError("no data source: give --data-root or --train-split/--test-split")
    if labels is not None and list(labels) != list(index.label_names):
        raise ConfigError(
            f"label table mismatch: checkpoint has {labels}, data has {index.label_names}"
        )
    if len(index.label_names) != state.model.cfg.num_classes:
        raise ConfigError("data class count differs from the checkpoint's classifier width")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = evaluate_model(state.model, index, PreprocessSpec(state.model.cfg.image_size),
                            args.batch)
    write_report(aggregate([result.metrics]), out / "metrics.csv")
    result.confusion.write_csv(out / "confusion.csv")
    print(" ".join(f"{k}={v:.4f}" for k, v in result.metrics.items()))
    return EXIT_OK


def cmd_saliency(args) -> int:
    state, _ = checkpoint_load(args.checkpoint)
    model = state.model
    n_classes = model.cfg.num_classes
    if args.class_id is not None and not 0 <= args.class_id < n_classes:
        raise ConfigError(f"--class-id {args.class_id} outside [0, {n_classes})")
    if not 0.0 < args.mask_quantile < 1.0:
        raise ConfigError("--mask-quantile must lie in (0, 1)")
    target = "predicted" if args.class_id is None else args.class_id
    spec = PreprocessSpec(model.cfg.image_size)
    failures = 0
    for path in args.images:
        try:
            rgb = load_resized(path, spec.image_size)
            result = compute_saliency(model, normalize(to_unit(rgb), spec), target,
                                      "quantile", args.mask_quantile)
            save_panels(render_panels(rgb, result), args.out, Path(path).stem)
        except DatasetError as exc:
            failures += 1
            print(f"error: {exc}", file=sys.stderr)
    return EXIT_CONFIG if failures else EXIT_OK


def cmd_make_synthetic(args) -> int:
    make_shapes_dataset(args.out, args.classes, args.per_class, args.size, args.seed)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "crossval": cmd_crossval,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
