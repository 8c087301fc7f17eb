"""CIFAR binary readers, synthetic desk-scale datasets, augmentation and batching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32


class CorruptFileError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] image mode or [N,D] vector mode, float64
    labels: np.ndarray  # int64 [N]
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0,{self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_mode(self):
        return self.images.ndim == 4


@dataclass
class BatchPlan:
    batch_size: int = 128
    seed: int = 0
    drop_last: bool = False
    crop_pad4: bool = False
    hflip: bool = False
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def batches_per_epoch(self, n):
        return n // self.batch_size if self.drop_last else math.ceil(n / self.batch_size)


# ---------------------------------------------------------------- CIFAR


def _read_records(path, label_bytes, classes):
    raw = Path(path).read_bytes()
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) % rec:
        expected = (len(raw) // rec + 1) * rec
        raise CorruptFileError(
            f"{path}: expected a multiple of {rec} bytes (next: {expected}), got {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        i = int(bad[0])
        raise CorruptFileError(
            f"{path}: label {labels[i]} >= {classes} at byte offset {i * rec + label_bytes - 1}"
        )
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _expect_size(path, n_records, rec):
    actual = Path(path).stat().st_size
    if actual != n_records * rec:
        raise CorruptFileError(f"{path}: expected {n_records * rec} bytes, got {actual}")


def _locate(root, *names):
    root = Path(root)
    for cand in (root, *(root / n for n in names)):
        if cand.is_dir():
            yield cand


def load_cifar(path, variant="cifar10"):
    """Return (train, test) Datasets from the binary distribution under ``path``."""
    if variant == "cifar10":
        base = next((d for d in _locate(path, "cifar-10-batches-bin") if (d / "test_batch.bin").exists()), None)
        if base is None:
            raise FileNotFoundError(f"no CIFAR-10 binary batches under {path}")
        parts = []
        for i in range(1, 6):
            f = base / f"data_batch_{i}.bin"
            _expect_size(f, 10000, 1 + CIFAR_PIXELS)
            parts.append(_read_records(f, 1, 10))
        _expect_size(base / "test_batch.bin", 10000, 1 + CIFAR_PIXELS)
        tx, ty = _read_records(base / "test_batch.bin", 1, 10)
        train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10, "train")
        return train, Dataset(tx, ty, 10, "test")
    if variant == "cifar100":
        base = next((d for d in _locate(path, "cifar-100-binary") if (d / "test.bin").exists()), None)
        if base is None:
            raise FileNotFoundError(f"no CIFAR-100 binary files under {path}")
        _expect_size(base / "train.bin", 50000, 2 + CIFAR_PIXELS)
        _expect_size(base / "test.bin", 10000, 2 + CIFAR_PIXELS)
        # coarse label byte is skipped: fine labels only
        x, y = _read_records(base / "train.bin", 2, 100)
        tx, ty = _read_records(base / "test.bin", 2, 100)
        return Dataset(x, y, 100, "train"), Dataset(tx, ty, 100, "test")
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def write_cifar_records(ds, path, variant="cifar10"):
    """Write ``ds`` in the CIFAR record layout (pixels quantized to bytes)."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR layout needs 3x32x32 images, got {ds.images.shape[1:]}")
    pix = np.rint(ds.images.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    lab = ds.labels.astype(np.uint8)[:, None]
    cols = [lab, pix] if variant == "cifar10" else [np.zeros_like(lab), lab, pix]
    Path(path).write_bytes(np.concatenate(cols, axis=1).tobytes())


def read_cifar_records(path, variant="cifar10"):
    classes = 10 if variant == "cifar10" else 100
    x, y = _read_records(path, 1 if variant == "cifar10" else 2, classes)
    return Dataset(x, y, classes)


# ---------------------------------------------------------------- synthetic


def synthetic_blobs(n_per_class, classes, dims=None, image_shape=None, spread=0.1, seed=0, split="train"):
    """Gaussian clusters (``dims``) or noisy colored-patch images (``image_shape``).

    Class centers depend only on ``seed``; the per-sample noise also depends on
    ``split`` so train/test share centers but not samples. Image pixels are
    quantized to k/255 so the CIFAR byte layout round-trips exactly.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if (dims is None) == (image_shape is None):
        raise ValueError("give exactly one of dims / image_shape")
    centers_rng = np.random.default_rng([seed, 100])
    noise_rng = np.random.default_rng([seed, 101, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(classes), n_per_class)
    if dims is not None:
        centers = centers_rng.normal(0.0, 1.0, size=(classes, dims)) * 2.0
        x = centers[labels] + spread * noise_rng.normal(size=(len(labels), dims))
    else:
        c, h, w = image_shape
        templates = np.empty((classes, c, h, w))
        for k in range(classes):
            background = centers_rng.uniform(0.2, 0.4, size=c)
            color = centers_rng.uniform(0.0, 1.0, size=c)
            ph, pw = max(1, h // 2), max(1, w // 2)
            top, left = centers_rng.integers(0, h - ph + 1), centers_rng.integers(0, w - pw + 1)
            templates[k] = background[:, None, None]
            templates[k, :, top:top + ph, left:left + pw] = color[:, None, None]
        x = templates[labels] + spread * noise_rng.normal(size=(len(labels), c, h, w))
        x = np.rint(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(x, labels, classes, split)


# ---------------------------------------------------------------- normalization / augmentation


def channel_stats(ds):
    axes = (0, 2, 3) if ds.image_mode else (0,)
    return ds.images.mean(axis=axes), ds.images.std(axis=axes)


def normalize(x, mean, std):
    if mean is None:
        return x
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    std = np.where(np.asarray(std) > 0, std, 1.0)
    return (x - np.reshape(mean, shape)) / np.reshape(std, shape)


def augment(x, crop_pad4=False, hflip=False, rng=None, return_params=False):
    """Reflect-pad-4 random crop and/or horizontal flip of an image batch."""
    n, _, h, w = x.shape
    rng = rng if rng is not None else np.random.default_rng()
    offsets = np.full((n, 2), 4)
    flips = np.zeros(n, dtype=bool)
    out = x
    if crop_pad4:
        offsets = rng.integers(0, 9, size=(n, 2))
        padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
        out = np.empty_like(x)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if hflip:
        flips = rng.random(n) < 0.5
        out = out.copy() if out is x else out
        out[flips] = out[flips][..., ::-1]
    if return_params:
        return out, offsets, flips
    return out


def epoch_permutation(n, seed, epoch_index):
    return np.random.default_rng([seed, 1, epoch_index]).permutation(n)


def iterate_epoch(ds, plan, epoch_index, rng=None, shuffle=True):
    """Yield (x, y) batches; the order depends only on (plan.seed, epoch_index).

    Augmentation applies to the train split only; normalization to both.
    """
    n = len(ds)
    order = epoch_permutation(n, plan.seed, epoch_index) if shuffle else np.arange(n)
    train = ds.split == "train"
    if rng is None:
        rng = np.random.default_rng([plan.seed, 2, epoch_index])
    stop = plan.batches_per_epoch(n) * plan.batch_size
    for start in range(0, min(stop, n), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        x = ds.images[idx]
        if train and ds.image_mode and (plan.crop_pad4 or plan.hflip):
            x = augment(x, plan.crop_pad4, plan.hflip, rng)
        yield normalize(x, plan.mean, plan.std), ds.labels[idx]
