"""Epoch loops, evaluation passes and cross-validation used by the CLI."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import AugmentSpec, DatasetIndex, ImageLoader, PreprocessSpec, make_batches
from .metrics import ConfusionMatrix, MetricsReport, aggregate, evaluate
from .model import (
    SGD,
    Adam,
    HybridConfig,
    HybridModel,
    PlateauState,
    TrainState,
    plateau_step,
    train_step,
)
from .nn import cross_entropy
from .tensor import no_grad

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "val_mcc", "lr")


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    loss: float
    metrics: dict[str, float]


def evaluate_model(model: HybridModel, index: DatasetIndex, spec: PreprocessSpec,
                   batch_size: int = 32, loader: ImageLoader | None = None) -> EvalResult:
    """Infer-mode pass over ``index``."""
    model.eval()
    cm = ConfusionMatrix(len(index.label_names), index.label_names)
    total, n = 0.0, 0
    with no_grad():
        for batch in make_batches(index, batch_size, seed=None, preprocess_spec=spec,
                                  loader=loader):
            logits = model(batch.images)
            total += cross_entropy(logits, batch.labels).item() * len(batch.labels)
            n += len(batch.labels)
            cm.update(batch.labels, logits.data.argmax(axis=1))
    return EvalResult(cm, total / n, evaluate(cm))


def new_state(cfg: HybridConfig, lr: float, optimizer: str = "adam",
              plateau: PlateauState | None = None) -> TrainState:
    model = HybridModel(cfg)
    params = dict(model.named_parameters())
    opt = SGD(params) if optimizer == "sgd" else Adam(params)
    return TrainState(model, lr, opt, plateau or PlateauState())


def fit(state: TrainState, train: DatasetIndex, val: DatasetIndex, epochs: int,
        batch_size: int, spec: PreprocessSpec, seed: int,
        augment_spec: AugmentSpec | None = None, log_path: Path | None = None,
        on_best: Callable[[TrainState], None] | None = None) -> list[dict[str, float]]:
    """Train for ``epochs`` epochs, stepping the plateau schedule on validation loss."""
    loader = ImageLoader(spec.image_size)
    history = []
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPOCH_COLUMNS)
    best = float("inf")
    try:
        for epoch in range(state.epoch, state.epoch + epochs):
            losses = []
            for batch in make_batches(train, batch_size, seed=seed, preprocess_spec=spec,
                                      augment_spec=augment_spec, epoch=epoch, loader=loader):
                if len(batch.labels) < 2:  # batch norm needs two samples
                    continue
                state, loss = train_step(state, batch.images, batch.labels)
                losses.append(loss)
            state.epoch = epoch + 1
            result = evaluate_model(state.model, val, spec, batch_size, loader)
            row = {
                "epoch": epoch + 1,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_loss": result.loss,
                "val_accuracy": result.metrics["accuracy"],
                "val_mcc": result.metrics["mcc"],
                "lr": state.lr,
            }
            history.append(row)
            logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f", row["epoch"],
                        row["train_loss"], row["val_loss"], row["val_accuracy"])
            if fh is not None:
                writer.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in EPOCH_COLUMNS[1:-1]]
                                + [repr(row["lr"])])
                fh.flush()
            if result.loss < best and on_best is not None:
                best = result.loss
                on_best(state)
            plateau_step(state, result.loss)
    finally:
        if fh is not None:
            fh.close()
    return history


def crossval(index: DatasetIndex, folds: list[tuple[DatasetIndex, DatasetIndex]],
             make_cfg: Callable[[int], HybridConfig], lr: float, optimizer: str,
             epochs: int, batch_size: int, spec: PreprocessSpec, master_seed: int,
             augment_spec: Callable[[int], AugmentSpec | None], out_dir: Path,
             plateau: Callable[[], PlateauState]) -> MetricsReport:
    """Train and score one fresh model per fold; fold ``i`` uses seed ``master_seed + i``."""
    fold_metrics = []
    for i, (train, val) in enumerate(folds):
        fold_seed = master_seed + i
        state = new_state(make_cfg(fold_seed), lr, optimizer, plateau())
        fit(state, train, val, epochs, batch_size, spec, fold_seed, augment_spec(fold_seed),
            log_path=out_dir / f"fold{i}_epochs.csv")
        result = evaluate_model(state.model, val, spec, batch_size)
        result.confusion.write_csv(out_dir / f"fold{i}_confusion.csv")
        fold_metrics.append(result.metrics)
        logger.info("fold %d mcc=%.4f acc=%.4f", i, result.metrics["mcc"],
                    result.metrics["accuracy"])
    return aggregate(fold_metrics)
