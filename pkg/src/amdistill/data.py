"""Datasets: CIFAR-10 binary batches, a synthetic image task, batching, Mixup."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(IOError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # (n, c, h, w) float, normalised
    labels: np.ndarray            # (n,) int64
    num_classes: int
    split: str = "train"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    raw: Optional[np.ndarray] = None   # original uint8 pixels when loaded from disk

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        """First ``n`` samples."""
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split,
                       self.mean, self.std, None if self.raw is None else self.raw[:n])


# -- CIFAR-10 -----------------------------------------------------------------

def read_cifar10_batch(path, expected_records: Optional[int] = 10000) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: per record a label byte then 3072 pixel bytes
    (R plane, G plane, B plane, each row-major 32x32)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 batch file: {path}")
    buf = path.read_bytes()
    if expected_records is not None:
        need = expected_records * CIFAR_RECORD
        if len(buf) != need:
            raise DataError(f"{path}: expected {need} bytes ({expected_records} records of "
                            f"{CIFAR_RECORD}), got {len(buf)}")
    elif len(buf) % CIFAR_RECORD:
        raise DataError(f"{path}: length {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataError(f"{path}: label byte above 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def write_cifar10_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


def _cifar_dir(root: Path) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILE).exists() or (cand / CIFAR_TRAIN_FILES[0]).exists():
            return cand
    if not root.exists():
        raise DataError(f"dataset directory does not exist: {root}")
    raise DataError(f"no CIFAR-10 binary batches under {root}")


def channel_stats(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = raw.astype(np.float64) / 255.0
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def standardize(raw: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(dtype)


def load_cifar10(root, cache_dir=None, expected_records: Optional[int] = 10000,
                 dtype=np.float32) -> Tuple[Dataset, Dataset]:
    """Load the five train batches and the test batch, standardised with
    per-channel statistics of the train split.

    Statistics are cached as JSON in ``cache_dir`` when given.
    """
    d = _cifar_dir(Path(root))
    parts = [read_cifar10_batch(d / f, expected_records) for f in CIFAR_TRAIN_FILES]
    tr_raw = np.concatenate([p[0] for p in parts])
    tr_lab = np.concatenate([p[1] for p in parts])
    te_raw, te_lab = read_cifar10_batch(d / CIFAR_TEST_FILE, expected_records)

    stats_file = Path(cache_dir) / "cifar10_norm_stats.json" if cache_dir else None
    if stats_file is not None and stats_file.exists():
        cached = json.loads(stats_file.read_text())
        mean, std = np.array(cached["mean"]), np.array(cached["std"])
    else:
        mean, std = channel_stats(tr_raw)
        if stats_file is not None:
            stats_file.parent.mkdir(parents=True, exist_ok=True)
            stats_file.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    train = Dataset(standardize(tr_raw, mean, std, dtype), tr_lab, 10, "train", mean, std, tr_raw)
    test = Dataset(standardize(te_raw, mean, std, dtype), te_lab, 10, "test", mean, std, te_raw)
    return train, test


# -- synthetic task -----------------------------------------------------------

def _stripe_prototypes(num_classes: int, channels: int, rng: np.random.Generator):
    angles = np.pi * np.arange(num_classes) / num_classes
    freqs = rng.uniform(1.2, 2.2, num_classes)
    colors = rng.normal(size=(num_classes, channels))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    return angles, freqs, colors


def synth_dataset(num_classes: int = 10, n_per_class: int = 100, image_size: int = 16,
                  seed: int = 0, split: str = "train", channels: int = 3, noise: float = 0.5,
                  distractors: int = 2, patch: Optional[int] = None, jitter: bool = True,
                  dtype=np.float32) -> Dataset:
    """Class-conditional stripe patches on a noisy background.

    Every class owns a stripe orientation, frequency and colour (drawn from
    ``seed``, shared across splits). Each image holds one class patch at a
    random location plus ``distractors`` Gaussian blobs of random colour that
    carry no label information. With ``noise=0, distractors=0, jitter=False``
    all images of a class are identical.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    patch = patch or image_size // 2
    if patch > image_size:
        raise ValueError("patch larger than image")
    angles, freqs, colors = _stripe_prototypes(num_classes, channels, np.random.default_rng(seed))
    split_id = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([seed, split_id])

    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.zeros((n, channels, image_size, image_size))
    yy, xx = np.mgrid[0:patch, 0:patch].astype(np.float64)
    gy, gx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    span = image_size - patch + 1
    for i, c in enumerate(labels):
        img = images[i]
        for _ in range(distractors):
            cy, cx = rng.uniform(0, image_size, 2)
            width = rng.uniform(1.0, 2.5)
            blob = np.exp(-((gy - cy) ** 2 + (gx - cx) ** 2) / (2 * width ** 2))
            col = rng.normal(size=channels)
            img += 1.5 * col[:, None, None] * blob
        phase = rng.uniform(0, 2 * np.pi) if jitter else 0.0
        oy, ox = (rng.integers(0, span, 2) if jitter else ((image_size - patch) // 2,) * 2)
        wave = np.sin(freqs[c] * (xx * np.cos(angles[c]) + yy * np.sin(angles[c])) + phase)
        img[:, oy:oy + patch, ox:ox + patch] += 2.0 * colors[c][:, None, None] * wave
        if noise:
            img += rng.normal(0.0, noise, img.shape)
    order = rng.permutation(n)
    return Dataset(images[order].astype(dtype), labels[order], num_classes, split,
                   np.zeros(channels), np.ones(channels))


# -- batching and augmentation ------------------------------------------------

def iterate_batches(ds: Dataset, batch_size: int, shuffle: bool = False,
                    rng: Optional[np.random.Generator] = None, with_index: bool = False) -> Iterator[tuple]:
    """Yield ``(x, y)`` (or ``(x, y, indices)``) in dataset order or a seeded shuffle."""
    idx = np.arange(len(ds))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        idx = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        sel = idx[start:start + batch_size]
        if with_index:
            yield ds.images[sel], ds.labels[sel], sel
        else:
            yield ds.images[sel], ds.labels[sel]


def pad_crop(x: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``pad`` and take a random crop of the original size per sample."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (oy, ox) in enumerate(offs):
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return out


@dataclass
class MixupConfig:
    alpha: float = 0.2
    enabled: bool = False

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be positive")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def mixup_batch(x: np.ndarray, y: np.ndarray, cfg: MixupConfig, rng: np.random.Generator,
                lam: Optional[float] = None):
    """Convex combination of the batch with a permutation of itself.

    Returns ``(x_mix, y_mix, meta)`` where meta holds ``lam`` and ``perm``;
    ``lam`` is drawn from Beta(alpha, alpha) unless given.
    """
    if len(x) < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if lam is None:
        lam = float(rng.beta(cfg.alpha, cfg.alpha))
    perm = rng.permutation(len(x))
    x_mix = (lam * x + (1 - lam) * x[perm]).astype(x.dtype)
    y_mix = (lam * y + (1 - lam) * y[perm]).astype(y.dtype)
    return x_mix, y_mix, {"lam": lam, "perm": perm}
