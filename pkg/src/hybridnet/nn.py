"""Layers shared by both branches: dense, normalization, dropout, loss.

Modules follow the familiar ``Module`` pattern: parameters are ``Tensor``
attributes with ``requires_grad=True``; running statistics live in
``self.buffers``. ``train()``/``eval()`` flip the mode recursively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, _result, gelu, leaky_relu, matmul, relu, softmax  # noqa: F401

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1
HEAD_WIDTH = 256
HEAD_ALPHA = 0.1
HEAD_DROPOUT = 0.5


class Module:
    training: bool = True

    def __init__(self) -> None:
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in a stable traversal order."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise ValueError(
                    f"tensor {name!r}: expected shape {arr.shape}, got {state[name].shape}"
                )
            arr[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer in place (used by gradient checks)."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in m.buffers:
                m.buffers[name] = m.buffers[name].astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=np.float32), requires_grad=True)


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


# ----------------------------------------------------------------------
# dense


@dataclass
class DenseParams:
    weight: Tensor
    bias: Tensor | None


def dense_forward(x: Tensor, p: DenseParams) -> Tensor:
    if x.shape[-1] != p.weight.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} != dense input {p.weight.shape[0]}")
    out = matmul(x, p.weight)
    return out if p.bias is None else out + p.bias


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        super().__init__()
        if out_features < 1 or in_features < 1:
            raise ValueError("dense layer widths must be >= 1")
        w = np.zeros((in_features, out_features)) if zero_init else he_uniform(
            rng, (in_features, out_features), in_features)
        self.weight = param(w)
        self.bias = param(np.zeros(out_features)) if bias else None

    @property
    def params(self) -> DenseParams:
        return DenseParams(self.weight, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.params)


# ----------------------------------------------------------------------
# activations


def activation(kind: str, x: Tensor, alpha: float = HEAD_ALPHA) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------
# normalization


@dataclass
class NormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = NORM_MOMENTUM
    eps: float = NORM_EPS
    mode: str = "train"


def batch_norm(x: Tensor, s: NormState) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    Train mode uses batch statistics and updates the running estimates in
    place (unbiased variance, like common frameworks). Infer mode uses the
    running estimates.
    """
    if s.eps <= 0:
        raise ValueError("eps must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    gamma = s.gamma.data.reshape(bshape)
    beta = s.beta.data.reshape(bshape)

    if s.mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + s.eps)
        xhat = (x.data - mu) * inv
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        s.running_mean *= 1.0 - s.momentum
        s.running_mean += s.momentum * mu.reshape(-1)
        s.running_var *= 1.0 - s.momentum
        s.running_var += s.momentum * unbiased

        def bw(g):
            dxhat = g * gamma
            dx = inv / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif s.mode == "infer":
        inv = 1.0 / np.sqrt(s.running_var.reshape(bshape) + s.eps)
        xhat = (x.data - s.running_mean.reshape(bshape)) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown norm mode {s.mode!r}")

    out = (xhat * gamma + beta).astype(x.dtype)
    return _result(out, (x, s.gamma, s.beta), "batch_norm", bw)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = NORM_EPS, momentum: float = NORM_MOMENTUM):
        super().__init__()
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def state(self) -> NormState:
        return NormState(self.gamma, self.beta, self.buffers["running_mean"],
                         self.buffers["running_var"], self.momentum, self.eps,
                         "train" if self.training else "infer")

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.state())


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), "layer_norm", bw)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = NORM_EPS):
        super().__init__()
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


# ----------------------------------------------------------------------
# dropout


@dataclass
class DropoutSpec:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


def dropout(x: Tensor, spec: DropoutSpec, mode: str) -> Tensor:
    """Inverted dropout; identity in infer mode or at rate 0."""
    if mode == "infer" or spec.rate == 0.0:
        return x
    rng = np.random.default_rng(spec.seed)
    keep = rng.random(x.shape) >= spec.rate
    scale = (keep / (1.0 - spec.rate)).astype(x.dtype)
    return x * Tensor(scale)


class Dropout(Module):
    """Dropout whose mask stream is set by :meth:`reseed`.

    Each call in train mode draws the next mask from a generator seeded by the
    owning model, so a forward pass is a pure function of (inputs, seed).
    """

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self._rng = np.random.default_rng(0)

    def reseed(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return x
        seed = int(self._rng.integers(2**63 - 1))
        return dropout(x, DropoutSpec(self.rate, seed), "train")


# ----------------------------------------------------------------------
# the 256-wide head used after each branch and inside the classifier


class DenseBlockHead(Module):
    """dense(256) -> LeakyReLU(0.1) -> batch norm -> dropout(0.5)."""

    def __init__(self, in_features: int, rng: np.random.Generator,
                 width: int = HEAD_WIDTH, dropout_rate: float = HEAD_DROPOUT):
        super().__init__()
        self.dense = Dense(in_features, width, rng)
        self.norm = BatchNorm(width)
        self.drop = Dropout(dropout_rate)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            raise ValueError(f"dense block head expects [N, features], got {x.shape}")
        h = leaky_relu(self.dense(x), HEAD_ALPHA)
        return self.drop(self.norm(h))


def dense_block_head(x: Tensor, head: DenseBlockHead) -> Tensor:
    return head(x)


# ----------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bw)
