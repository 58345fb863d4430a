"""Shifted-window transformer branch.

Tokens are kept as ``[N, L, D]`` between blocks and reshaped to an
``[N, H, W, D]`` grid for windowing. A block with an odd index inside its
stage rolls the grid by half a window before attention and masks pairs that
were not neighbours before the roll.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Dense, LayerNorm, Module
from .tensor import (
    Tensor,
    gelu,
    matmul,
    reshape,
    roll,
    softmax,
    split,
    take_rows,
    transpose,
)

MASK_VALUE = -1e9


@dataclass
class SwinConfig:
    embed_dim: int = 96
    depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    num_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    window_size: int = 7
    mlp_ratio: float = 4.0
    image_size: int = 224
    patch_size: int = 4
    in_channels: int = 3

    @classmethod
    def tiny(cls, image_size: int = 224) -> "SwinConfig":
        return cls(image_size=image_size)

    @classmethod
    def desk(cls, image_size: int = 32) -> "SwinConfig":
        return cls(embed_dim=24, depths=[1, 1], num_heads=[2, 4], window_size=4,
                   mlp_ratio=2.0, image_size=image_size)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def final_dim(self) -> int:
        return self.embed_dim * 2 ** (self.num_stages - 1)

    def stage_resolutions(self) -> list[int]:
        side = self.image_size // self.patch_size
        return [side // 2**i for i in range(self.num_stages)]

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}"
            )
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have the same length")
        if any(d < 1 for d in self.depths):
            raise ValueError("every stage needs at least one block")
        side = self.image_size // self.patch_size
        for i, heads in enumerate(self.num_heads):
            dim = self.embed_dim * 2**i
            if dim % heads:
                raise ValueError(f"stage {i}: width {dim} not divisible by {heads} heads")
            res = side // 2**i
            if res < 1 or (i > 0 and (side // 2 ** (i - 1)) % 2):
                raise ValueError(f"stage {i}: token grid cannot be halved to reach it")
            w = min(self.window_size, res)
            if res % w:
                raise ValueError(f"stage {i}: window {w} does not divide grid {res}")


# ----------------------------------------------------------------------
# grid plumbing


def patch_partition(image: Tensor, patch: int) -> Tensor:
    """``[N,C,H,W] -> [N, (H/p)(W/p), p*p*C]``, each patch flattened row-major."""
    n, c, h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = reshape(image, (n, c, h // patch, patch, w // patch, patch))
    x = transpose(x, (0, 2, 4, 3, 5, 1))
    return reshape(x, (n, (h // patch) * (w // patch), patch * patch * c))


def window_partition(grid: Tensor, w: int) -> Tensor:
    n, h, wd, d = grid.shape
    if h % w or wd % w:
        raise ValueError(f"window {w} does not divide grid {h}x{wd}")
    x = reshape(grid, (n, h // w, w, wd // w, w, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n * (h // w) * (wd // w), w * w, d))


def window_reverse(windows: Tensor, w: int, h: int, wd: int) -> Tensor:
    d = windows.shape[-1]
    n = windows.shape[0] // ((h // w) * (wd // w))
    x = reshape(windows, (n, h // w, wd // w, w, w, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, h, wd, d))


def cyclic_shift(grid: Tensor, s: int, inverse: bool = False) -> Tensor:
    h, w = grid.shape[1], grid.shape[2]
    if not 0 <= s < min(h, w):
        raise ValueError(f"shift {s} out of range for grid {h}x{w}")
    if s == 0:
        return grid
    k = s if inverse else -s
    return roll(grid, (k, k), (1, 2))


def _region_ids(n: int, w: int, s: int) -> np.ndarray:
    ids = np.zeros(n, dtype=np.int64)
    ids[n - w:n - s] = 1
    ids[n - s:] = 2
    return ids


def build_attn_mask(h: int, w_grid: int, w: int, s: int) -> np.ndarray:
    """Additive mask ``[numWindows, w*w, w*w]`` for attention on a rolled grid.

    After rolling by ``-s`` the last ``s`` rows and columns hold tokens that
    wrapped around from the opposite border. Pairs whose band labels differ
    get ``MASK_VALUE``.
    """
    if s >= w:
        raise ValueError(f"shift {s} must be smaller than window {w}")
    if h % w or w_grid % w:
        raise ValueError(f"window {w} does not divide grid {h}x{w_grid}")
    n_win = (h // w) * (w_grid // w)
    if s == 0:
        return np.zeros((n_win, w * w, w * w), dtype=np.float32)
    labels = _region_ids(h, w, s)[:, None] * 3 + _region_ids(w_grid, w, s)[None, :]
    win = labels.reshape(h // w, w, w_grid // w, w).transpose(0, 2, 1, 3).reshape(n_win, w * w)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, MASK_VALUE).astype(np.float32)


def relative_position_index(w: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (w - 1)
    return rel[..., 0] * (2 * w - 1) + rel[..., 1]


@dataclass
class RelPosBias:
    table: Tensor
    index: np.ndarray

    def __call__(self) -> Tensor:
        n = self.index.shape[0]
        heads = self.table.shape[1]
        bias = take_rows(self.table, self.index.reshape(-1))
        return transpose(reshape(bias, (n, n, heads)), (2, 0, 1))


# ----------------------------------------------------------------------
# attention


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.qkv = Dense(dim, 3 * dim, rng)
        self.proj = Dense(dim, dim, rng)
        self.bias_table = Tensor(
            rng.normal(0.0, 0.02, size=((2 * window - 1) ** 2, heads)).astype(np.float32),
            requires_grad=True,
        )
        self.bias_index = relative_position_index(window)
        self.last_weights: np.ndarray | None = None

    @property
    def rel_pos_bias(self) -> RelPosBias:
        return RelPosBias(self.bias_table, self.bias_index)

    def forward(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return window_attention(windows, self, mask)


def window_attention(windows: Tensor, attn: WindowAttention,
                     mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window.

    The softmax weights of the latest call are kept on ``attn.last_weights``
    as ``[B, heads, n, n]`` for inspection.
    """
    b, n, d = windows.shape
    h = attn.heads
    if d % h:
        raise ValueError(f"width {d} not divisible by {h} heads")
    hd = d // h
    qkv = reshape(attn.qkv(windows), (b, n, 3, h, hd))
    q, k, v = (reshape(t, (b, n, h, hd)) for t in split(qkv, 3, axis=2))
    q = transpose(q, (0, 2, 1, 3)) * (hd ** -0.5)
    k = transpose(k, (0, 2, 3, 1))
    v = transpose(v, (0, 2, 1, 3))
    scores = matmul(q, k) + attn.rel_pos_bias()
    if mask is not None:
        n_win = mask.shape[0]
        scores = reshape(scores, (b // n_win, n_win, h, n, n))
        scores = scores + Tensor(mask[None, :, None].astype(scores.dtype))
        scores = reshape(scores, (b, h, n, n))
    weights = softmax(scores, axis=-1)
    attn.last_weights = weights.data
    out = transpose(matmul(weights, v), (0, 2, 1, 3))
    return attn.proj(reshape(out, (b, n, d)))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Dense(dim, hidden, rng)
        self.fc2 = Dense(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class SwinBlock(Module):
    def __init__(self, dim: int, heads: int, resolution: int, window: int, shift: int,
                 mlp_ratio: float, rng: np.random.Generator):
        super().__init__()
        if resolution <= window:
            window, shift = resolution, 0
        if resolution % window:
            raise ValueError(f"window {window} does not divide grid {resolution}")
        self.resolution = resolution
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.mask = build_attn_mask(resolution, resolution, window, shift) if shift else None

    def forward(self, x: Tensor) -> Tensor:
        n, length, d = x.shape
        r = self.resolution
        if length != r * r:
            raise ValueError(f"expected {r * r} tokens, got {length}")
        grid = reshape(self.norm1(x), (n, r, r, d))
        grid = cyclic_shift(grid, self.shift)
        windows = self.attn(window_partition(grid, self.window), self.mask)
        grid = window_reverse(windows, self.window, r, r)
        grid = cyclic_shift(grid, self.shift, inverse=True)
        x = x + reshape(grid, (n, length, d))
        return x + self.mlp(self.norm2(x))


def swin_block(tokens: Tensor, block: SwinBlock) -> Tensor:
    return block(tokens)


class PatchMerging(Module):
    """2x2 neighbourhood concat (4D) -> layer norm -> linear to 2D."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(4 * dim)
        self.reduction = Dense(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, grid: Tensor) -> Tensor:
        n, h, w, d = grid.shape
        if h % 2 or w % 2:
            raise ValueError(f"patch merging needs even extents, got {h}x{w}")
        x = reshape(grid, (n, h // 2, 2, w // 2, 2, d))
        x = transpose(x, (0, 1, 3, 4, 2, 5))
        x = reshape(x, (n, h // 2, w // 2, 4 * d))
        return self.reduction(self.norm(x))


def patch_merging(grid: Tensor, merge: PatchMerging) -> Tensor:
    return merge(grid)


class SwinBranch(Module):
    def __init__(self, cfg: SwinConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        raw = cfg.patch_size * cfg.patch_size * cfg.in_channels
        self.embed = Dense(raw, cfg.embed_dim, rng)
        self.blocks: list[SwinBlock] = []
        self.merges: list[PatchMerging] = []
        self.stage_of_block: list[int] = []
        dim = cfg.embed_dim
        for stage, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads)):
            res = cfg.stage_resolutions()[stage]
            if stage > 0:
                self.merges.append(PatchMerging(dim // 2, rng))
            for i in range(depth):
                shift = cfg.window_size // 2 if i % 2 else 0
                self.blocks.append(
                    SwinBlock(dim, heads, res, cfg.window_size, shift, cfg.mlp_ratio, rng)
                )
                self.stage_of_block.append(stage)
            dim *= 2
        self.norm = LayerNorm(cfg.final_dim)

    def patch_embed(self, image: Tensor) -> Tensor:
        return self.embed(patch_partition(image, self.cfg.patch_size))

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h != w or h != self.cfg.image_size or c != self.cfg.in_channels:
            raise ValueError(
                f"expected [N,{self.cfg.in_channels},{self.cfg.image_size},"
                f"{self.cfg.image_size}] images, got {image.shape}"
            )
        x = self.patch_embed(image)
        stage = 0
        for block, block_stage in zip(self.blocks, self.stage_of_block):
            if block_stage != stage:
                r = self.cfg.stage_resolutions()[stage]
                grid = reshape(x, (n, r, r, x.shape[-1]))
                x = self.merges[stage](grid)
                x = reshape(x, (n, (r // 2) ** 2, x.shape[-1]))
                stage = block_stage
            x = block(x)
        return self.norm(x).mean(axis=1)


def swin_forward(image: Tensor, branch: SwinBranch) -> Tensor:
    return branch(image)
