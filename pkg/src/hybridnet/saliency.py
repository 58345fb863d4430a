"""Vanilla input-gradient saliency and its four-panel rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .nn import Module
from .tensor import Tensor, backward

PANEL_SUFFIXES = ("original", "saliency", "overlay", "mask")
DEFAULT_QUANTILE = 0.15
COLORMAP = "viridis"


@dataclass
class SaliencyResult:
    heatmap: np.ndarray
    mask: np.ndarray
    predicted_label: int
    target_label: int
    score: float
    overlay: np.ndarray | None = None


def normalize_heatmap(heat: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    heat = np.asarray(heat, dtype=np.float64)
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def threshold_mask(heatmap: np.ndarray, policy: str = "quantile",
                   value: float = DEFAULT_QUANTILE) -> np.ndarray:
    """Binary mask from a [0, 1] heatmap.

    ``fixed``: pixels >= ``value``. ``quantile``: the top ``value`` fraction of
    pixels, ties at the cut included. An all-zero map yields an all-zero mask.
    """
    if policy == "fixed":
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"fixed threshold must lie in [0, 1], got {value}")
    elif policy == "quantile":
        if not 0.0 < value < 1.0:
            raise ValueError(f"quantile must lie in (0, 1), got {value}")
    else:
        raise ValueError(f"unknown mask policy {policy!r}")
    if not heatmap.any():
        return np.zeros(heatmap.shape, dtype=np.uint8)
    if policy == "fixed":
        return (heatmap >= value).astype(np.uint8)
    k = max(1, math.ceil(value * heatmap.size))
    cut = np.sort(heatmap, axis=None)[::-1][k - 1]
    return (heatmap >= cut).astype(np.uint8)


def compute_saliency(model: Module, image: np.ndarray, target="predicted",
                     mask_policy: str = "quantile",
                     mask_value: float = DEFAULT_QUANTILE) -> SaliencyResult:
    """Gradient of one pre-softmax logit w.r.t. the input pixels.

    ``image`` is a preprocessed ``[3,H,W]`` array. Per-pixel score is the
    channel-wise maximum of the absolute gradient.
    """
    model.eval()
    x = Tensor(np.asarray(image, dtype=np.float32)[None].copy(), requires_grad=True)
    logits = model(x)
    num_classes = logits.shape[1]
    predicted = int(np.argmax(logits.data[0]))
    if target == "predicted":
        chosen = predicted
    else:
        chosen = int(target)
        if not 0 <= chosen < num_classes:
            raise ValueError(f"class id {chosen} outside [0, {num_classes})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[0, chosen] = 1.0
    score = (logits * Tensor(onehot)).sum()
    backward(score)
    grad = x.grad[0] if x.grad is not None else np.zeros_like(x.data[0])
    heat = normalize_heatmap(np.abs(grad).max(axis=0))
    mask = threshold_mask(heat, mask_policy, mask_value)
    return SaliencyResult(heat, mask, predicted, chosen, score.item())


def colorize(heatmap: np.ndarray) -> np.ndarray:
    rgba = colormaps[COLORMAP](heatmap)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def render_panels(original: np.ndarray, result: SaliencyResult,
                  alpha: float = 0.5) -> dict[str, np.ndarray]:
    """Original, colored heatmap, blended overlay and binary mask as uint8 images."""
    colored = colorize(result.heatmap)
    blend = (1.0 - alpha) * original.astype(np.float64) + alpha * colored.astype(np.float64)
    overlay = np.clip(np.round(blend), 0, 255).astype(np.uint8)
    result.overlay = overlay
    return {
        "original": original,
        "saliency": colored,
        "overlay": overlay,
        "mask": (result.mask * 255).astype(np.uint8),
    }


def save_panels(panels: dict[str, np.ndarray], out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for suffix in PANEL_SUFFIXES:
        path = out_dir / f"{stem}_{suffix}.png"
        Image.fromarray(panels[suffix]).save(path, format="PNG")
        paths.append(path)
    return paths
