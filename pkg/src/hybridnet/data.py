"""Dataset indexing, splitting, preprocessing, augmentation and batching."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_EXTS = {".jpg", ".jpeg", ".png"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
THREADS_ENV = "HYBRIDNET_THREADS"


class DatasetError(ValueError):
    pass


class StratificationError(DatasetError):
    pass


@dataclass
class DatasetIndex:
    root: Path
    samples: list[tuple[str, int]]
    label_names: list[str]
    warnings: int = 0
    empty_classes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples], dtype=np.int64)

    def path(self, i: int) -> Path:
        return self.root / self.samples[i][0]

    def subset(self, indices: Sequence[int]) -> "DatasetIndex":
        return DatasetIndex(self.root, [self.samples[i] for i in indices], self.label_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.label_names))


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.size
        return True
    except (OSError, UnidentifiedImageError):
        return False


def scan_dataset(root) -> DatasetIndex:
    """Index ``<root>/<class_name>/<image>`` files, labels by sorted class name."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no category folders under {root}")
    samples, warnings, empty = [], 0, []
    for label, name in enumerate(classes):
        found = 0
        for f in sorted((root / name).iterdir()):
            if not f.is_file():
                continue
            if f.suffix.lower() not in IMAGE_EXTS or not _readable(f):
                warnings += 1
                logger.warning("skipping unreadable or non-image file %s", f)
                continue
            samples.append((f"{name}/{f.name}", label))
            found += 1
        if not found:
            empty.append(name)
            logger.warning("category %r has no images", name)
    samples.sort(key=lambda s: s[0])
    return DatasetIndex(root, samples, classes, warnings, empty)


def _read_split_csv(path: Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "label"} <= set(reader.fieldnames):
            raise DatasetError(f"{path}: expected header 'filename,label'")
        return [(row["filename"].strip(), row["label"].strip()) for row in reader]


def load_split_file(train_csv, test_csv, root) -> tuple[DatasetIndex, DatasetIndex]:
    """Build train/test indices from two CSV split files sharing one label table."""
    root = Path(root)
    train_rows = _read_split_csv(Path(train_csv))
    test_rows = _read_split_csv(Path(test_csv))
    overlap = sorted({p for p, _ in train_rows} & {p for p, _ in test_rows})
    if overlap:
        raise DatasetError(f"paths present in both splits: {', '.join(overlap)}")
    names = sorted({lab for _, lab in train_rows + test_rows})
    lookup = {n: i for i, n in enumerate(names)}
    for rel, _ in train_rows + test_rows:
        if not (root / rel).is_file():
            raise DatasetError(f"split file references missing image {root / rel}")
    train = DatasetIndex(root, [(p, lookup[lab]) for p, lab in train_rows], names)
    test = DatasetIndex(root, [(p, lookup[lab]) for p, lab in test_rows], names)
    unseen = [n for n, c in zip(names, train.class_counts()) if c == 0]
    if unseen:
        train.warnings += len(unseen)
        train.empty_classes = unseen
        logger.warning("labels with no training samples: %s", ", ".join(unseen))
    return train, test


def read_label_table(train_csv, test_csv) -> list[str]:
    rows = _read_split_csv(Path(train_csv)) + _read_split_csv(Path(test_csv))
    return sorted({lab for _, lab in rows})


# ----------------------------------------------------------------------
# splitting


def _per_class(index: DatasetIndex) -> list[np.ndarray]:
    labels = index.labels
    return [np.flatnonzero(labels == c) for c in range(len(index.label_names))]


def holdout_train_count(n: int, ratio: float = 0.8) -> int:
    """``round(ratio * n)`` clamped to ``[1, n - 1]``."""
    return min(max(math.floor(ratio * n + 0.5), 1), n - 1)


def stratified_holdout(index: DatasetIndex, ratio: float = 0.8,
                       seed: int = 0) -> tuple[DatasetIndex, DatasetIndex]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c, members in enumerate(_per_class(index)):
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise StratificationError(
                f"class {index.label_names[c]!r} has {len(members)} sample(s); need at least 2"
            )
        shuffled = rng.permutation(members)
        k = holdout_train_count(len(members), ratio)
        train.extend(shuffled[:k].tolist())
        test.extend(shuffled[k:].tolist())
    return index.subset(sorted(train)), index.subset(sorted(test))


def stratified_kfold(index: DatasetIndex, k: int = 5,
                     seed: int = 0) -> list[tuple[DatasetIndex, DatasetIndex]]:
    """Per-class round of ``k`` folds; the first ``n mod k`` folds take one extra."""
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for c, members in enumerate(_per_class(index)):
        if len(members) == 0:
            continue
        if len(members) < k:
            raise StratificationError(
                f"class {index.label_names[c]!r} has {len(members)} sample(s); need at least {k}"
            )
        for fold, chunk in zip(folds, np.array_split(rng.permutation(members), k)):
            fold.extend(chunk.tolist())
    everything = set(range(len(index)))
    out = []
    for fold in folds:
        val = sorted(fold)
        out.append((index.subset(sorted(everything - set(val))), index.subset(val)))
    return out


# ----------------------------------------------------------------------
# images


@dataclass
class PreprocessSpec:
    image_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


def load_resized(path, size: int) -> np.ndarray:
    """Decode to 8-bit RGB and bilinearly resize to ``size x size``; ``[H,W,3]`` uint8."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.width == 0 or im.height == 0:
                raise DatasetError(f"zero-extent image: {path}")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None


def to_unit(rgb: np.ndarray) -> np.ndarray:
    """``[H,W,3]`` uint8 to ``[3,H,W]`` float32 in [0, 1]."""
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def normalize(x: np.ndarray, spec: PreprocessSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(spec.std, dtype=np.float32)[:, None, None]
    return ((x - mean) / std).astype(np.float32)


def preprocess(path, spec: PreprocessSpec | None = None) -> np.ndarray:
    spec = spec or PreprocessSpec()
    return normalize(to_unit(load_resized(path, spec.image_size)), spec)


@dataclass
class AugmentSpec:
    shear_max: float = 10.0
    rotation_max: float = 30.0
    vertical_flip: float = 0.5
    brightness_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not 0 < lo <= hi:
            raise ValueError("brightness range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.vertical_flip <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0))


def augment(image: np.ndarray, spec: AugmentSpec, mode: str = "train",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Random shear, rotation, vertical flip and brightness on a ``[C,H,W]`` image in [0,1].

    Pixels sampled from outside the frame take the nearest edge value.
    """
    if mode != "train":
        return image
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    shear = math.radians(rng.uniform(-spec.shear_max, spec.shear_max))
    angle = math.radians(rng.uniform(-spec.rotation_max, spec.rotation_max))
    flip = rng.random() < spec.vertical_flip
    bright = rng.uniform(*spec.brightness_range)

    out = image
    if shear != 0.0 or angle != 0.0:
        cos, sin = math.cos(angle), math.sin(angle)
        forward = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, math.tan(shear)],
                                                                   [0.0, 1.0]])
        inv = np.linalg.inv(forward)
        center = (np.array(image.shape[1:], dtype=np.float64) - 1) / 2
        offset = center - inv @ center
        out = np.stack([
            ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="nearest")
            for ch in out
        ])
    if flip:
        out = out[:, ::-1, :]
    if bright != 1.0:
        out = np.clip(out * bright, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=np.float32)


# ----------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    indices: np.ndarray


def worker_count(requested: int | None = None) -> int:
    n = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


class ImageLoader:
    """Decodes and resizes images once, then serves ``[3,S,S]`` arrays in [0,1]."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[Path, np.ndarray] = {}

    def __call__(self, path: Path) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            arr = to_unit(load_resized(path, self.image_size))
            self._cache[path] = arr
        return arr


def make_batches(index: DatasetIndex, batch_size: int, seed: int | None = 0,
                 drop_last: bool = False, preprocess_spec: PreprocessSpec | None = None,
                 augment_spec: AugmentSpec | None = None, epoch: int = 0,
                 loader: ImageLoader | None = None, workers: int | None = None,
                 ) -> Iterator[Batch]:
    """Yield batches over one epoch.

    ``seed=None`` keeps index order. Augmentation draws come from a generator
    keyed on (augment seed, epoch, sample position), so the output does not
    depend on the number of worker threads.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if len(index) == 0:
        raise DatasetError("cannot batch an empty index")
    spec = preprocess_spec or PreprocessSpec()
    loader = loader or ImageLoader(spec.image_size)
    order = (np.arange(len(index)) if seed is None
             else np.random.default_rng([seed, epoch]).permutation(len(index)))
    labels = index.labels

    def load(i: int) -> np.ndarray:
        x = loader(index.path(i))
        if augment_spec is not None:
            rng = np.random.default_rng([augment_spec.seed, epoch, int(i)])
            x = augment(x, augment_spec, "train", rng)
        return normalize(x, spec)

    n_workers = worker_count(workers)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if drop_last and len(chunk) < batch_size:
                break
            arrays = list(pool.map(load, chunk.tolist()))
            yield Batch(Tensor(np.stack(arrays)), labels[chunk], chunk)
