"""Datasets: CIFAR binary records, a synthetic desk-scale task, augmentation, batching."""
import glob
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DataError

CIFAR_PIXELS = 3 * 32 * 32
_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
_NUM_CLASSES = {"cifar10": 10, "cifar100": 100}
# per-sample noise scale: a linear probe still separates the classes, a small net does not saturate
SYNTH_NOISE = 4.0


@dataclass
class Dataset:
    images: np.ndarray  # N,3,H,W float32 in [0, 1]
    labels: np.ndarray  # N int64
    mean: np.ndarray  # 3,H,W per-pixel mean of the training split
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def normalized(self):
        return (self.images - self.mean).astype(np.float32)


def parse_cifar_bytes(raw, variant):
    """Decode CIFAR binary records into ``(images uint8 N,3,32,32, labels int64)``.

    CIFAR-100 records carry a coarse then a fine label byte; the fine one is kept.
    """
    if variant not in _LABEL_BYTES:
        raise DataError(f"unknown CIFAR variant {variant!r} (expected cifar10 or cifar100)")
    nlab = _LABEL_BYTES[variant]
    rec = nlab + CIFAR_PIXELS
    if len(raw) == 0:
        raise DataError("empty CIFAR file", offset=0)
    if len(raw) % rec:
        whole = len(raw) - len(raw) % rec
        raise DataError(f"truncated CIFAR file: {len(raw)} bytes is not a multiple of the {rec}-byte record", whole)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, nlab - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= _NUM_CLASSES[variant])
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {labels[i]} out of range in record {i}", i * rec + nlab - 1)
    images = arr[:, nlab:].reshape(-1, 3, 32, 32)
    return images, labels


def _cifar_files(path, variant, split):
    if os.path.isfile(path):
        return [path]
    if variant == "cifar10":
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    else:
        pattern = "train.bin" if split == "train" else "test.bin"
    files = sorted(glob.glob(os.path.join(path, "**", pattern), recursive=True))
    if not files:
        raise DataError(f"no {variant} {split} files matching {pattern!r} under {path}")
    return files


def load_cifar(path, variant, split="train", mean=None):
    """Load a CIFAR file or directory; pixels are scaled to ``[0, 1]``.

    ``mean`` defaults to the per-pixel mean of the loaded images, which is
    only appropriate for the training split.
    """
    parts = []
    labels = []
    for f in _cifar_files(path, variant, split):
        with open(f, "rb") as fh:
            raw = fh.read()
        try:
            im, lab = parse_cifar_bytes(raw, variant)
        except DataError as exc:
            raise DataError(f"{f}: {exc}") from None
        parts.append(im)
        labels.append(lab)
    images = np.concatenate(parts).astype(np.float32) / np.float32(255)
    if mean is None:
        mean = images.mean(axis=0)
    return Dataset(images, np.concatenate(labels), mean.astype(np.float32), split, _NUM_CLASSES[variant])


def load_cifar_splits(path, variant):
    train = load_cifar(path, variant, "train")
    return train, load_cifar(path, variant, "test", mean=train.mean)


def _class_patterns(num_classes, image_size, rng):
    coarse = rng.normal(size=(num_classes, 3, 4, 4))
    reps = -(-image_size // 4)
    smooth = np.kron(coarse, np.ones((reps, reps)))[:, :, :image_size, :image_size]
    tint = rng.normal(size=(num_classes, 3, 1, 1))
    return 0.6 * smooth + 0.6 * tint


def synth_dataset(num_classes, n_per_class, image_size, seed, split="train", noise=SYNTH_NOISE, mean=None):
    """Class-conditional images: a fixed per-class pattern plus per-sample noise.

    Patterns depend only on ``(seed, num_classes, image_size)``; the noise
    stream also depends on ``split``, so train and test share classes but not
    samples. Labels are balanced and interleaved.
    """
    if min(num_classes, n_per_class, image_size) < 1:
        raise DataError("num_classes, n_per_class and image_size must be positive")
    patterns = _class_patterns(num_classes, image_size, rngmod.stream(seed, "synth", num_classes, image_size))
    noise_rng = rngmod.stream(seed, "synth", 0 if split == "train" else 1, num_classes, n_per_class)
    labels = np.tile(np.arange(num_classes), n_per_class).astype(np.int64)
    raw = patterns[labels] + noise * noise_rng.normal(size=(labels.size, 3, image_size, image_size))
    images = (1.0 / (1.0 + np.exp(-raw))).astype(np.float32)
    if mean is None:
        mean = images.mean(axis=0)
    return Dataset(images, labels, mean.astype(np.float32), split, num_classes)


def synth_splits(num_classes, n_train, n_test, image_size, seed, noise=SYNTH_NOISE):
    train = synth_dataset(num_classes, n_train, image_size, seed, "train", noise)
    test = synth_dataset(num_classes, n_test, image_size, seed, "test", noise, mean=train.mean)
    return train, test


def augment(image, rng, pad=4, mean=None):
    """Random ``pad``-pixel translation (zero padding) and horizontal flip of one C,H,W image."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    out = np.ascontiguousarray(out)
    if mean is not None:
        out = out - mean
    return out


def iterate_batches(dataset, batch_size, seed, epoch, augment_images=True):
    """Shuffled, optionally augmented, mean-subtracted mini-batches for one epoch.

    The permutation depends on ``(seed, epoch)`` and each batch's augmentation
    on ``(seed, epoch, batch index)``, so batch contents never depend on how
    far ahead a consumer reads.
    """
    n = len(dataset)
    perm = rngmod.stream(seed, "shuffle", epoch).permutation(n)
    for b, start in enumerate(range(0, n, batch_size)):
        idx = perm[start:start + batch_size]
        images = dataset.images[idx]
        if augment_images:
            rng = rngmod.stream(seed, "augment", epoch, b)
            images = np.stack([augment(im, rng) for im in images])
        yield (images - dataset.mean).astype(np.float32), dataset.labels[idx]
