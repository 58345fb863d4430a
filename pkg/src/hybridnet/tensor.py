"""Numpy-backed tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its parents
and a backward closure on the output. Node ids come from a process-wide
counter, so sorting reachable nodes by id yields a topological order of the
graph without a separate tape object.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _op: str = "", _backward: Callable | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._op = _op
        self._backward = _backward

    # ------------------------------------------------------------------
    # basic properties

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # operator sugar

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op,
                  _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# creation


def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0,
           low: float = -1.0, high: float = 1.0, seed: int | None = None,
           data=None, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor of the given shape.

    ``init`` is one of ``"zeros"``, ``"constant"`` (uses ``value``),
    ``"uniform"`` (``low``, ``high``, ``seed``) or ``"from_data"``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must contain at least one extent")
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        if not math.isfinite(value):
            raise ValueError("constant fill value must be finite")
        arr = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        rng = np.random.default_rng(seed)
        arr = rng.uniform(low, high, size=shape).astype(dtype)
    elif init == "from_data":
        arr = np.asarray(data, dtype=dtype)
        if arr.size != math.prod(shape):
            raise ValueError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return create(shape, "zeros", requires_grad=requires_grad, dtype=dtype)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), "mul", bw)


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def _check_broadcast(sa, sb) -> None:
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"shapes {sa} and {sb} are not broadcast-compatible") from None


# ----------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    known = [s for s in shape if s != -1]
    if -1 not in shape and math.prod(shape) != x.size:
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")
    if -1 in shape and x.size % max(1, math.prod(known)) != 0:
        raise ValueError(f"cannot reshape {x.shape} into {shape}")
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), "reshape", bw)


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(x.ndim)):
        raise ValueError(f"{perm} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(perm))
    out = x.data.transpose(perm)

    def bw(g):
        return (g.transpose(inverse),)

    return _result(out, (x,), "transpose", bw)


def reshape_transpose(x: Tensor, shape: Sequence[int] | None = None,
                      perm: Sequence[int] | None = None) -> Tensor:
    """Reshape, then permute axes. Either step may be omitted."""
    if shape is not None:
        x = reshape(x, shape)
    if perm is not None:
        x = transpose(x, perm)
    return x


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"cannot concat shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, "concat", bw)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """``x[..., start:stop, ...]`` along one axis."""
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def bw(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result(np.ascontiguousarray(out), (x,), "slice", bw)


def split(x: Tensor, parts: int, axis: int) -> list[Tensor]:
    n = x.shape[axis]
    if n % parts:
        raise ValueError(f"axis of extent {n} does not split into {parts} parts")
    step = n // parts
    return [slice_axis(x, i * step, (i + 1) * step, axis) for i in range(parts)]


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(x.data, shifts, axes)

    def bw(g):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    return _result(out, (x,), "roll", bw)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along the first axis."""
    index = np.asarray(index)
    out = table.data[index]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(out, (table,), "take_rows", bw)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), "matmul", bw)


# ----------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return _result(out, (x,), "relu", bw)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not math.isfinite(alpha):
        raise ValueError("alpha must be finite")
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    out = x.data * slope

    def bw(g):
        return (g * slope,)

    return _result(out, (x,), "leaky_relu", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / math.sqrt(2.0)))
    out = (v * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * v * v) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + v * pdf)).astype(x.dtype),)

    return _result(out, (x,), "gelu", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), "softmax", bw)


# ----------------------------------------------------------------------
# convolution and pooling


def _pad_hw(arr: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return arr
    p = padding
    return np.pad(arr, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def im2col(x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Gather convolution patches: ``[N,C,H,W] -> [N,H',W',C*kh*kw]``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    n, c, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = _pad_hw(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)

    def bw(g):
        g6 = g.reshape(n, ho, wo, c, kh, kw)
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if padding:
            gp = gp[:, :, padding:-padding, padding:-padding]
        return (gp,)

    return _result(np.ascontiguousarray(cols), (x,), "im2col", bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via patch gather and a matrix product."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects [N,C,H,W] input and [F,C,kh,kw] weight")
    f, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c}")
    cols = im2col(x, kh, kw, stride, padding)
    wmat = reshape(weight, (f, c * kh * kw))
    out = matmul(cols, transpose(wmat, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return transpose(out, (0, 3, 1, 2))


def pool2d(x: Tensor, kind: str, window: int, stride: int | None = None,
           padding: int = 0) -> Tensor:
    """Max or average pooling over square windows.

    Max pooling pads with ``-inf`` and routes each output gradient to the first
    maximal element in row-major window order. Average pooling pads with zeros
    and counts padded cells in the divisor.
    """
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ValueError(f"window {window} exceeds spatial extent {h}x{w}")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    fill = -np.inf if kind == "max" else 0.0
    xp = _pad_hw(x.data, padding, fill)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    k = window

    if kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == idx)
            if padding:
                gp = gp[:, :, padding:-padding, padding:-padding]
            return (gp,)
    else:
        out = flat.mean(axis=-1)

        def bw(g):
            gp = np.zeros(xp.shape, dtype=g.dtype)
            share = g / (k * k)
            for i in range(k):
                for j in range(k):
                    gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
            if padding:
                gp = gp[:, :, padding:-padding, padding:-padding]
            return (gp,)

    return _result(np.ascontiguousarray(out), (x,), f"{kind}_pool", bw)


# ----------------------------------------------------------------------
# backward pass


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    order.sort(key=lambda t: t.node_id, reverse=True)
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a one-element tensor.

    Leaf tensors accumulate into ``.grad``. The returned mapping holds the
    gradient of every reachable tensor that requires grad.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in _reachable(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        result[node] = g
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return result


# ----------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Largest relative error between tape and central-difference gradients.

    Both routes run in float64. The relative error of one entry is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    return check_gradients(lambda: f(x64), [x64], eps)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-3,
                    max_entries: int | None = None, seed: int = 0,
                    per_tensor: bool = False) -> float:
    """Central-difference check of ``f()`` w.r.t. entries of ``tensors``.

    ``tensors`` are perturbed in place and must already hold float64 data.
    With ``max_entries`` set, only that many randomly chosen entries (across
    all tensors) are probed. ``per_tensor`` draws a tensor uniformly first and
    then an entry inside it, so small tensors are not drowned out by large ones.
    """
    if eps <= 0 or not math.isfinite(eps):
        raise ValueError("eps must be a positive finite number")
    for t in tensors:
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError("checked function must return a scalar")
    if not np.isfinite(loss.data).all():
        raise ValueError("checked function is not finite at the probe point")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]

    probes = [(ti, i) for ti, t in enumerate(tensors) for i in range(t.size)]
    if max_entries is not None and max_entries < len(probes):
        rng = np.random.default_rng(seed)
        if per_tensor:
            chosen: set[tuple[int, int]] = set()
            while len(chosen) < max_entries:
                ti = int(rng.integers(len(tensors)))
                chosen.add((ti, int(rng.integers(tensors[ti].size))))
            probes = sorted(chosen)
        else:
            pick = rng.choice(len(probes), size=max_entries, replace=False)
            probes = [probes[p] for p in sorted(pick)]

    worst = 0.0
    with no_grad():
        for ti, i in probes:
            flat = tensors[ti].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f().data.reshape(-1)[0])
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError("checked function became non-finite under perturbation")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[ti].reshape(-1)[i])
            err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
            worst = max(worst, err)
    return worst
