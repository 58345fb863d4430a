"""The fused CNN + transformer classifier and its training machinery."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .densenet import DenseNetBranch, DenseNetConfig
from .nn import HEAD_DROPOUT, HEAD_WIDTH, Dense, DenseBlockHead, Dropout, Module, cross_entropy
from .swin import SwinBranch, SwinConfig
from .tensor import Tensor, backward, concat, no_grad


class NonFiniteLossError(ArithmeticError):
    """Raised when a training step produces a NaN or infinite loss."""


@dataclass
class HybridConfig:
    swin: SwinConfig = field(default_factory=SwinConfig.desk)
    densenet: DenseNetConfig = field(default_factory=DenseNetConfig.desk)
    num_classes: int = 2
    fusion_width: int = HEAD_WIDTH
    classifier_dropout: float = HEAD_DROPOUT
    seed: int = 0

    @classmethod
    def preset(cls, name: str, num_classes: int, seed: int = 0,
               image_size: int | None = None) -> "HybridConfig":
        if name == "desk":
            size = image_size or 32
            return cls(SwinConfig.desk(size), DenseNetConfig.desk(size), num_classes, seed=seed)
        if name == "tiny":
            size = image_size or 224
            return cls(SwinConfig.tiny(size), DenseNetConfig.densenet201(size), num_classes,
                       seed=seed)
        raise ValueError(f"unknown preset {name!r} (expected 'tiny' or 'desk')")

    @property
    def image_size(self) -> int:
        return self.swin.image_size

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fusion_width < 1:
            raise ValueError("fusion_width must be >= 1")
        if self.swin.image_size != self.densenet.image_size:
            raise ValueError("both branches must see the same image size")
        self.swin.validate()
        self.densenet.validate()

    def to_text(self) -> str:
        """Flat ``key=value`` lines; lists are comma separated."""
        lines = []
        for key, value in _flatten(asdict(self)):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HybridConfig":
        pairs = dict(
            line.split("=", 1) for line in text.splitlines() if line and not line.startswith("#")
        )
        sub = {"swin": SwinConfig, "densenet": DenseNetConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name in sub:
                kwargs[f.name] = _build(sub[f.name], pairs, f.name + ".")
            elif f.name in pairs:
                kwargs[f.name] = _coerce(f.type, pairs[f.name])
        return cls(**kwargs)


def _flatten(d: dict, prefix: str = ""):
    for key, value in d.items():
        if isinstance(value, dict):
            yield from _flatten(value, f"{prefix}{key}.")
        else:
            yield prefix + key, value


def _coerce(type_name, raw: str):
    type_name = str(type_name)
    if "list" in type_name:
        return [int(v) for v in raw.split(",") if v]
    if "float" in type_name:
        return float(raw)
    if "int" in type_name:
        return int(raw)
    return raw


def _build(klass, pairs: dict[str, str], prefix: str):
    kwargs = {
        f.name: _coerce(f.type, pairs[prefix + f.name])
        for f in fields(klass) if prefix + f.name in pairs
    }
    return klass(**kwargs)


# ----------------------------------------------------------------------
# model


def fuse(cnn_feat: Tensor, tr_feat: Tensor) -> Tensor:
    """Concatenate branch features, CNN columns first."""
    if cnn_feat.shape[0] != tr_feat.shape[0]:
        raise ValueError(f"batch mismatch: {cnn_feat.shape[0]} vs {tr_feat.shape[0]}")
    return concat([cnn_feat, tr_feat], axis=1)


class HybridModel(Module):
    def __init__(self, cfg: HybridConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.cnn = DenseNetBranch(cfg.densenet, rng)
        self.transformer = SwinBranch(cfg.swin, rng)
        w, p = cfg.fusion_width, cfg.classifier_dropout
        self.cnn_head = DenseBlockHead(self.cnn.feature_dim, rng, w, p)
        self.transformer_head = DenseBlockHead(cfg.swin.final_dim, rng, w, p)
        self.classifier_head = DenseBlockHead(2 * w, rng, HEAD_WIDTH, p)
        # zero init keeps the initial prediction uniform over classes
        self.classifier_out = Dense(HEAD_WIDTH, cfg.num_classes, rng, zero_init=True)

    def reseed(self, seed: int) -> None:
        """Fix the dropout masks of the next forward pass."""
        drops = [m for m in self.modules() if isinstance(m, Dropout)]
        for i, d in enumerate(drops):
            d.reseed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))

    def features(self, images: Tensor) -> Tensor:
        cnn = self.cnn_head(self.cnn(images))
        tr = self.transformer_head(self.transformer(images))
        return fuse(cnn, tr)

    def classify(self, fused: Tensor) -> Tensor:
        return self.classifier_out(self.classifier_head(fused))

    def forward(self, images: Tensor) -> Tensor:
        return self.classify(self.features(images))


def forward(model: HybridModel, images: Tensor, mode: str = "infer") -> Tensor:
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    model.train(mode == "train")
    return model(images)


# ----------------------------------------------------------------------
# optimizers and LR schedule


class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - np.asarray(lr, p.data.dtype) * update).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()
        self.t = t


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.t = 0
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + p.grad
            p.data = (p.data - np.asarray(lr, p.data.dtype) * self.buf[k]).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"sgd.buf.{k}": v for k, v in self.buf.items()}

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.buf[k] = tensors[f"sgd.buf.{k}"].copy()
        self.t = t


@dataclass
class PlateauState:
    factor: float = 0.1
    patience: int = 3
    min_delta: float = 1e-4
    min_lr: float = 1e-6
    mode: str = "min"
    best: float = math.inf
    epochs_since_improve: int = 0
    reductions: int = 0

    def improved(self, metric: float) -> bool:
        if self.mode == "min":
            return metric < self.best - self.min_delta
        return metric > self.best + self.min_delta


@dataclass
class TrainState:
    model: HybridModel
    lr: float
    optimizer: Adam | SGD | None = None
    plateau: PlateauState = field(default_factory=PlateauState)
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.optimizer is None:
            self.optimizer = Adam(dict(self.model.named_parameters()))
        if self.plateau.mode == "max" and self.plateau.best == math.inf:
            self.plateau.best = -math.inf


def plateau_step(state: TrainState, metric: float) -> TrainState:
    """Reduce the learning rate after ``patience`` epochs without improvement."""
    if not math.isfinite(metric):
        raise ValueError("monitored metric must be finite")
    pl = state.plateau
    if pl.improved(metric):
        pl.best = metric
        pl.epochs_since_improve = 0
        return state
    pl.epochs_since_improve += 1
    if pl.epochs_since_improve >= pl.patience:
        new_lr = max(state.lr * pl.factor, pl.min_lr)
        if new_lr < state.lr:
            state.lr = new_lr
            pl.reductions += 1
        pl.epochs_since_improve = 0
    return state


def train_step(state: TrainState, images: Tensor, labels) -> tuple[TrainState, float]:
    """One optimizer update on a batch; returns the pre-update loss."""
    labels = np.asarray(labels)
    if images.shape[0] == 0 or labels.size == 0:
        raise ValueError("empty batch")
    model = state.model
    model.train()
    model.reseed(model.cfg.seed * 1_000_003 + state.step)
    model.zero_grad()
    loss = cross_entropy(model(images), labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at step {state.step}")
    backward(loss)
    state.optimizer.step(state.lr)
    state.step += 1
    return state, value


def predict(model: HybridModel, images: Tensor) -> np.ndarray:
    model.eval()
    with no_grad():
        return model(images).data
