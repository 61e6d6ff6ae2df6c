"""Datasets: in-memory uint8 image sets, on-disk formats and synthetic tasks."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .qtensor import load_tensors, save_tensors


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int32, (N,)
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label per image")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def split(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified, seed-reproducible train/val split."""
        rng = np.random.default_rng(seed)
        train, val = [], []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(len(idx))]
            n_val = int(round(val_fraction * len(idx)))
            val.extend(idx[:n_val])
            train.extend(idx[n_val:])
        return self.subset(sorted(train)), self.subset(sorted(val))


def to_int8(images: np.ndarray) -> np.ndarray:
    """Network input encoding: pixel p -> int8 (p - 128), real value (p - 128) / 128."""
    return (np.asarray(images, dtype=np.int16) - 128).astype(np.int8)


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((np.asarray(images, dtype=np.float64) - 128.0) / 128.0).astype(dtype)


# ------------------------------------------------------------------ formats

def save_shard(ds: Dataset, path):
    save_tensors(path, {"images": ds.images, "labels": ds.labels},
                 {"num_classes": ds.num_classes, "name": ds.name})


def load_shard(path) -> Dataset:
    tensors, meta = load_tensors(path)
    return Dataset(tensors["images"], tensors["labels"], int(meta["num_classes"]),
                   meta.get("name", Path(path).stem))


def save_class_dirs(ds: Dataset, root, class_names=None):
    root = Path(root)
    names = class_names or [f"class_{c:03d}" for c in range(ds.num_classes)]
    for c, name in enumerate(names):
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        np.save(root / names[lab] / f"{i:06d}.npy", img)


def load_class_dirs(root) -> Dataset:
    """One subdirectory per class (sorted by name), one uint8 CHW ``.npy`` per sample."""
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class directories under {root}")
    images, labels = [], []
    for c, d in enumerate(classes):
        for f in sorted(d.glob("*.npy")):
            img = np.load(f)
            if img.dtype != np.uint8 or img.ndim != 3:
                raise ValueError(f"{f}: expected uint8 (C, H, W) array, got {img.dtype} {img.shape}")
            images.append(img)
            labels.append(c)
    if not images:
        raise ValueError(f"no samples under {root}")
    return Dataset(np.stack(images), np.asarray(labels), len(classes), root.name)


def load_dataset(path, fmt: str | None = None) -> Dataset:
    path = Path(path)
    fmt = fmt or ("dirs" if path.is_dir() else "shard")
    if fmt == "dirs":
        return load_class_dirs(path)
    if fmt == "shard":
        return load_shard(path)
    raise ValueError(f"unknown dataset format {fmt!r}")


# ------------------------------------------------------------------ synthetic

def _smooth_field(rng, shape, sigma):
    """Gaussian-smoothed white noise via FFT, normalized to zero mean / unit std."""
    c, h, w = shape
    noise = rng.standard_normal(shape)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    kernel = np.exp(-2 * (np.pi * sigma) ** 2 * (fx ** 2 + fy ** 2))
    out = np.real(np.fft.ifft2(np.fft.fft2(noise) * kernel))
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= out.std(axis=(1, 2), keepdims=True) + 1e-12
    return out


def make_task(num_classes: int = 10, samples_per_class: int = 40, resolution: int = 16,
              channels: int = 3, seed: int = 0, sigma: float = 1.5, noise: float = 0.6,
              shift: int = 2, contrast: float = 0.25, name: str = "") -> Dataset:
    """Classes are smooth random prototypes; samples are shifted, rescaled, noisy copies."""
    rng = np.random.default_rng(seed)
    shape = (channels, resolution, resolution)
    protos = [_smooth_field(rng, shape, sigma) for _ in range(num_classes)]
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(samples_per_class):
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            x = np.roll(protos[c], (int(dy), int(dx)), axis=(1, 2))
            x = x * (1.0 + contrast * rng.standard_normal()) + noise * rng.standard_normal(shape)
            images.append(np.clip(np.rint(128 + 40 * x), 0, 255))
            labels.append(c)
    order = rng.permutation(len(labels))
    return Dataset(np.asarray(images)[order], np.asarray(labels)[order], num_classes,
                   name or f"synthetic-{seed}")


def make_separable(n: int = 100, resolution: int = 8, channels: int = 3, seed: int = 0) -> Dataset:
    """Two classes differing in mean brightness: linearly separable after pooling."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 170, 86)[:, None, None, None]
    images = base + rng.integers(-20, 21, size=(n, channels, resolution, resolution))
    return Dataset(np.clip(images, 0, 255), labels, 2, f"separable-{seed}")


def transfer_pair(resolution: int = 16, num_classes: int = 10, samples_per_class: int = 40,
                  seed: int = 0):
    """Source (pretraining) and target (transfer) tasks with unrelated class prototypes.

    The target uses finer-grained prototypes than the source, so frozen source
    features transfer only partially and deeper updates pay off.
    """
    src = make_task(num_classes, samples_per_class * 2, resolution, seed=1000 + seed, sigma=1.5,
                    name="source")
    tgt = make_task(num_classes, samples_per_class, resolution, seed=2000 + seed, sigma=1.0,
                    name="target")
    return src, tgt
