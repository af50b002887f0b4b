"""Dataset ingestion: IDX (MNIST-style) and CIFAR-10 binary files, plus a
seeded synthetic generator, with deterministic batching.

Images load as float32 NCHW in [0, 1] and are normalized per channel; the
statistics used are recorded on the dataset so val splits can reuse the
train split's numbers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 x 32 x 32 pixel bytes


@dataclass
class LabeledDataset:
    images: np.ndarray        # float32, (N, C, H, W), normalized
    labels: np.ndarray        # int64, (N,)
    class_count: int
    split: str = "train"
    mean: np.ndarray | None = None   # per-channel stats the images were normalized with
    std: np.ndarray | None = None

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, n):
        """First n samples (images already shuffled or ordered as loaded)."""
        return LabeledDataset(self.images[:n], self.labels[:n], self.class_count,
                              self.split, self.mean, self.std)


def normalize(images, stats=None):
    """Standardize per channel; returns (images, (mean, std)) with the stats
    actually applied. Pass `stats` to reuse another split's numbers."""
    if stats is None:
        mean = images.mean(axis=(0, 2, 3))
        std = np.maximum(images.std(axis=(0, 2, 3)), 1e-8)
    else:
        mean, std = (np.asarray(s, dtype=np.float32) for s in stats)
    out = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32), (mean.astype(np.float32), std.astype(np.float32))


def _finish(images, labels, class_count, split, stats):
    images, (mean, std) = normalize(images, stats)
    return LabeledDataset(images, labels.astype(np.int64), class_count, split, mean, std)


def load_idx(images_path, labels_path, split="train", stats=None):
    """Parse an IDX image/label file pair (big-endian, as published)."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad IDX image magic 0x{magic:08x}, "
                             f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    if raw.size != count * rows * cols:
        raise ValueError(f"{images_path}: expected {count * rows * cols} pixel bytes, "
                         f"found {raw.size}")
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise ValueError(f"{labels_path}: truncated IDX header")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad IDX label magic 0x{magic:08x}, "
                             f"expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if labels.size != label_count:
        raise ValueError(f"{labels_path}: expected {label_count} labels, found {labels.size}")
    if label_count != count:
        raise ValueError(f"image/label count mismatch: {count} images vs {label_count} labels")
    images = raw.reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    return _finish(images, labels, int(labels.max()) + 1 if labels.size else 0, split, stats)


def load_cifar_binary(paths, split="train", stats=None):
    """Parse CIFAR-10 binary batches: rows of 1 label byte + R, G, B planes."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    chunks = []
    for path in paths:
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise ValueError(f"{path}: file length {raw.size} is not a positive multiple "
                             f"of {CIFAR_RECORD_BYTES}")
        chunks.append(raw.reshape(-1, CIFAR_RECORD_BYTES))
    rows = np.concatenate(chunks, axis=0)
    labels = rows[:, 0]
    images = rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return _finish(images, labels, 10, split, stats)


def make_synthetic(classes, per_class, size, seed, noise=0.25, jitter=0,
                   deform=0.0, channels=3, split="train", stats=None,
                   template_seed=None):
    """Seeded procedural dataset of class-dependent Gaussian-blob images.

    Each class is a layout of a few Gaussian blobs. Per sample, the blob
    positions and amplitudes are perturbed by `deform`, the image is rolled
    by up to `jitter` pixels, and `noise` adds Gaussian pixel noise. With
    all three knobs at zero every sample equals its class template, so the
    classes are trivially linearly separable; turning them up makes the
    task progressively harder. Class layouts draw from `template_seed`
    (default: `seed`), so a val split can share the train split's classes
    while sampling fresh perturbations: pass the train seed as
    template_seed and a different seed for the samples.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or size < 1:
        raise ValueError("per_class and size must be >= 1")
    template_rng = np.random.default_rng(seed if template_seed is None else template_seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A)))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    blobs_per_class = 3
    centers = template_rng.uniform(0.2 * size, 0.8 * size,
                                   size=(classes, blobs_per_class, 2)).astype(np.float32)
    widths = template_rng.uniform(0.08 * size, 0.22 * size,
                                  size=(classes, blobs_per_class)).astype(np.float32)
    amps = template_rng.uniform(-1.0, 1.0,
                                size=(classes, blobs_per_class, channels)).astype(np.float32)

    def render(c, center_shift, amp_scale):
        img = np.zeros((channels, size, size), dtype=np.float32)
        for b in range(blobs_per_class):
            cx = centers[c, b, 0] + center_shift[b, 0]
            cy = centers[c, b, 1] + center_shift[b, 1]
            bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                          / (2.0 * widths[c, b] ** 2))
            img += (amps[c, b] * amp_scale[b])[:, None, None] * bump
        return img

    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class).astype(np.int64)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    no_shift = np.zeros((blobs_per_class, 2), dtype=np.float32)
    unit_scale = np.ones((blobs_per_class, channels), dtype=np.float32)
    for i, c in enumerate(labels):
        if deform:
            shift = (deform * 0.1 * size
                     * rng.standard_normal((blobs_per_class, 2))).astype(np.float32)
            ascale = (1.0 + deform * rng.standard_normal(
                (blobs_per_class, channels))).astype(np.float32)
            img = render(c, shift, ascale)
        else:
            img = render(c, no_shift, unit_scale)
        if jitter:
            dx, dy = rng.integers(-jitter, jitter + 1, size=2)
            img = np.roll(np.roll(img, int(dy), axis=1), int(dx), axis=2)
        images[i] = img
        if noise:
            images[i] += noise * rng.standard_normal((channels, size, size)).astype(np.float32)
    return _finish(images, labels, classes, split, stats)


def batches(ds, batch_size, shuffle_seed=None, epoch=0, with_indices=False):
    """Yield (images, labels) batches; the permutation is a pure function of
    (shuffle_seed, epoch), and the final short batch is included. With
    `with_indices`, also yield each batch's dataset indices."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(
            np.random.SeedSequence((shuffle_seed, epoch))).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if with_indices:
            yield ds.images[idx], ds.labels[idx], idx
        else:
            yield ds.images[idx], ds.labels[idx]
