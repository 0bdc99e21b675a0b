"""Synthetic classification data and the CIFAR-10 binary format."""

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import ContractError

RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes


class ParseError(ContractError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ContractError("images/labels shape mismatch")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def synthetic_templates(num_classes: int, height: int, width: int, seed: int,
                        channels: int = 3) -> np.ndarray:
    """Per-class low-frequency image templates in [0.1, 0.9].

    Templates depend only on (seed, class), never on the split, so train
    and test draws share the same class structure.
    """
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / height
    xx = xx / width
    out = np.zeros((num_classes, channels, height, width))
    for c in range(num_classes):
        g = RngStream(seed, f"synthetic/template/{c}").generator()
        pat = np.zeros((channels, height, width))
        amp_total = 0.0
        for _ in range(3):
            fx, fy = g.uniform(0.5, 1.5, size=2)
            phase = g.uniform(0, 2 * np.pi)
            amps = g.uniform(0.5, 1.0, size=channels)
            wave = np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
            pat += amps[:, None, None] * wave[None]
            amp_total += amps.max()
        out[c] = 0.5 + 0.4 * pat / amp_total
    return np.clip(out, 0.1, 0.9)


def gen_synthetic(num_classes: int, n_per_class: int, height: int, width: int,
                  noise_sigma: float, seed: int, split: str = "train",
                  channels: int = 3) -> Dataset:
    """Class templates plus Gaussian pixel noise, clipped to [0, 1].

    Noise streams are disjoint per split; templates are shared.
    """
    if height < 8 or width < 8:
        raise ContractError("synthetic images must be at least 8x8")
    templates = synthetic_templates(num_classes, height, width, seed, channels)
    images = np.empty((num_classes * n_per_class, channels, height, width), dtype=np.float32)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    for c in range(num_classes):
        g = RngStream(seed, f"synthetic/noise/{split}/{c}").generator()
        noise = g.standard_normal((n_per_class, channels, height, width)) * noise_sigma
        block = np.clip(templates[c][None] + noise, 0.0, 1.0)
        images[c * n_per_class:(c + 1) * n_per_class] = block.astype(np.float32)
        labels[c * n_per_class:(c + 1) * n_per_class] = c
    return Dataset(images, labels, split=split)


def load_cifar10_binary(path, max_records: int | None = None) -> Dataset:
    """Read the public CIFAR-10 binary layout (3073-byte records)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % RECORD_BYTES != 0:
        raise ParseError(f"file length {len(raw)} is not a multiple of {RECORD_BYTES}")
    n = len(raw) // RECORD_BYTES
    if max_records is not None:
        n = min(n, max_records)
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        off = i * RECORD_BYTES
        label = raw[off]
        if label > 9:
            raise ParseError(f"label {label} > 9 at byte offset {off}")
        labels[i] = label
        planes = np.frombuffer(raw, dtype=np.uint8, count=3072, offset=off + 1)
        images[i] = planes.reshape(3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split="test")


def save_cifar10_binary(path, dataset: Dataset):
    """Write a dataset in the CIFAR-10 binary layout (fixtures, round-trips)."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ContractError("CIFAR-10 binary layout requires 3x32x32 images")
    with open(path, "wb") as f:
        for img, label in zip(dataset.images, dataset.labels):
            f.write(bytes([int(label)]))
            f.write(np.round(img * 255.0).astype(np.uint8).tobytes())
