"""Datasets, non-IID partitioning and trigger poisoning.

Images are float32 arrays shaped (N, C, H, W) with pixel values in [0, 1].
Every function here is pure: randomness comes only from the ``seed`` argument.
"""

from __future__ import annotations

import json
import math
import pickle
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class ImageSet:
    """A labeled image collection."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int = 10

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) pixels, got shape {self.x.shape}")
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} images but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.x[idx], self.y[idx], self.n_classes)

    def concat(self, other: "ImageSet") -> "ImageSet":
        return ImageSet(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            max(self.n_classes, other.n_classes),
        )


@dataclass
class TriggerPattern:
    """Additive pixel trigger; ``mask`` (H, W) limits where ``delta`` applies."""

    delta: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if not np.all(np.isfinite(self.delta)):
            raise ValueError("trigger delta must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
            if self.mask.shape != self.delta.shape[-2:]:
                raise ValueError(
                    f"mask shape {self.mask.shape} does not match delta {self.delta.shape}"
                )
            if not np.isin(self.mask, (0.0, 1.0)).all():
                raise ValueError("mask must be binary")
            self.delta = self.delta * self.mask

    @property
    def effective(self) -> np.ndarray:
        if self.mask is None:
            return self.delta
        return self.delta * self.mask

    @classmethod
    def patch(cls, image_shape, size: int = 3, value: float = 1.0, corner: str = "bottom-right"):
        """Solid square patch at an image corner."""
        c, h, w = image_shape
        if size > min(h, w):
            raise ValueError(f"patch of size {size} does not fit a {h}x{w} image")
        rows = slice(h - size, h) if corner.startswith("bottom") else slice(0, size)
        cols = slice(w - size, w) if corner.endswith("right") else slice(0, size)
        mask = np.zeros((h, w), dtype=np.float32)
        mask[rows, cols] = 1.0
        delta = np.zeros(image_shape, dtype=np.float32)
        delta[:, rows, cols] = value
        return cls(delta, mask)


@dataclass
class PoisonSpec:
    trigger: TriggerPattern
    target_label: int
    fraction: float

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"poison fraction must be in [0, 1], got {self.fraction}")
        if self.target_label < 0:
            raise ValueError("target_label must be a class index")


@dataclass
class PartitionPlan:
    assignments: list
    seed: int
    alpha: float

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "alpha": self.alpha, "assignments": self.assignments}
        )

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        raw = json.loads(text)
        return cls([list(map(int, a)) for a in raw["assignments"]], raw["seed"], raw["alpha"])


def _labels_of(dataset) -> np.ndarray:
    return np.asarray(getattr(dataset, "y", dataset), dtype=np.int64)


def dirichlet_partition(
    dataset,
    n_clients: int,
    alpha: float,
    seed: int,
    allow_empty_clients: bool = False,
    max_retries: int = 100,
) -> PartitionPlan:
    """Label-skew split: each class is divided across clients by a Dirichlet(alpha) draw.

    ``dataset`` may be an :class:`ImageSet` or a plain label array.
    A draw that leaves some client empty is redrawn, up to ``max_retries`` times.
    """
    labels = _labels_of(dataset)
    if len(labels) == 0:
        raise ValueError("cannot partition an empty dataset")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")

    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_retries):
        buckets = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                buckets[client].extend(part.tolist())
        if allow_empty_clients or all(buckets):
            return PartitionPlan([sorted(b) for b in buckets], seed, alpha)
    raise RuntimeError(
        f"no partition without empty clients after {max_retries} draws "
        f"(n_clients={n_clients}, alpha={alpha}, n={len(labels)})"
    )


def inject_trigger(pixels: np.ndarray, trigger: TriggerPattern) -> np.ndarray:
    """Add the trigger and clip to [0, 1]. Works on one image or a batch."""
    pixels = np.asarray(pixels, dtype=np.float32)
    delta = trigger.effective
    if pixels.shape[-delta.ndim:] != delta.shape:
        raise ValueError(f"trigger shape {delta.shape} does not match images {pixels.shape}")
    return np.clip(pixels + delta, 0.0, 1.0)


def choose_poison_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of the floor(fraction * n) samples to poison."""
    k = math.floor(fraction * n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False))


def poison_dataset(dataset: ImageSet, spec: PoisonSpec, seed: int) -> ImageSet:
    """Trigger and relabel a seeded random floor(fraction * N) subset, in place order."""
    if spec.target_label >= dataset.n_classes:
        raise ValueError(f"target label {spec.target_label} out of range")
    idx = choose_poison_indices(len(dataset), spec.fraction, seed)
    x = dataset.x.copy()
    y = dataset.y.copy()
    if len(idx):
        x[idx] = inject_trigger(x[idx], spec.trigger)
        y[idx] = spec.target_label
    return ImageSet(x, y, dataset.n_classes)


# --- loaders -----------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian-blob images.

    Each class owns a few coloured blobs at fixed positions; samples jitter
    blob position and brightness and add pixel noise. Blob centres stay out
    of the bottom-right ``corner_margin`` pixels, where the default trigger sits.
    """

    n_classes: int = 10
    channels: int = 3
    image_size: int = 16
    blobs_per_class: int = 3
    position_jitter: float = 1.5
    noise: float = 0.12
    width_range: tuple = (1.2, 2.5)
    colour_range: tuple = (0.15, 0.75)
    prototype_seed: int = 1234
    corner_margin: int = 5

    @cached_property
    def prototypes(self) -> list:
        rng = np.random.default_rng(self.prototype_seed)
        lo, hi = 1.0, self.image_size - 2.0
        edge = self.image_size - self.corner_margin

        def centre():
            while True:
                c = rng.uniform(lo, hi, size=2)
                if not (c[0] > edge and c[1] > edge):
                    return c

        return [
            [
                (centre(), rng.uniform(*self.width_range), rng.uniform(*self.colour_range, size=self.channels))
                for _ in range(self.blobs_per_class)
            ]
            for _ in range(self.n_classes)
        ]

    def sample(self, n: int, seed: int) -> ImageSet:
        rng = np.random.default_rng(seed)
        size = self.image_size
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
        labels = np.arange(n) % self.n_classes
        rng.shuffle(labels)
        x = np.full((n, self.channels, size, size), 0.1, dtype=np.float32)
        for c, blobs in enumerate(self.prototypes):
            members = np.flatnonzero(labels == c)
            m = len(members)
            if not m:
                continue
            img = np.zeros((m, self.channels, size, size), dtype=np.float32)
            for center, width, colour in blobs:
                cy = center[0] + rng.normal(0, self.position_jitter, size=m)
                cx = center[1] + rng.normal(0, self.position_jitter, size=m)
                gain = rng.uniform(0.7, 1.1, size=m)
                bump = np.exp(
                    -((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                    / (2 * width**2)
                )
                img += (gain[:, None, None, None] * colour[None, :, None, None]) * bump[:, None]
            x[members] += img
        x += rng.normal(0, self.noise, size=x.shape).astype(np.float32)
        return ImageSet(np.clip(x, 0.0, 1.0), labels, self.n_classes)


def load_synthetic(n_train: int, n_test: int, seed: int = 0, **kwargs):
    """Train/test splits drawn from the same blob prototypes."""
    spec = SyntheticSpec(**kwargs)
    return spec.sample(n_train, seed), spec.sample(n_test, seed + 7919)


def load_cifar10(root, n_train: Optional[int] = None, n_test: Optional[int] = None, seed: int = 0):
    """Read the python-pickle CIFAR-10 batches from ``root`` (no download).

    Optional ``n_train``/``n_test`` subsample each split by seed.
    """
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"

    def _read(names):
        xs, ys = [], []
        for name in names:
            path = root / name
            if not path.exists():
                raise FileNotFoundError(f"missing CIFAR-10 batch {path}")
            with open(path, "rb") as fh:
                batch = pickle.load(fh, encoding="latin1")
            xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(batch["labels"]))
        return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys)

    train = ImageSet(*_read([f"data_batch_{i}" for i in range(1, 6)]))
    test = ImageSet(*_read(["test_batch"]))
    rng = np.random.default_rng(seed)
    if n_train is not None:
        train = train.subset(np.sort(rng.choice(len(train), n_train, replace=False)))
    if n_test is not None:
        test = test.subset(np.sort(rng.choice(len(test), n_test, replace=False)))
    return train, test


def load_manifest(directory, n_classes: int = 10) -> ImageSet:
    """Load ``manifest.json`` (list of {file, label}) with one .npy tensor per image."""
    directory = Path(directory)
    entries = json.loads((directory / "manifest.json").read_text())
    if not entries:
        raise ValueError(f"{directory}/manifest.json lists no images")
    x = np.stack([np.load(directory / e["file"]) for e in entries]).astype(np.float32)
    y = np.array([int(e["label"]) for e in entries])
    if x.max() > 1.0:
        x = x / 255.0
    return ImageSet(x, y, n_classes)


def save_manifest(dataset: ImageSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, label) in enumerate(zip(dataset.x, dataset.y)):
        name = f"img_{i:06d}.npy"
        np.save(directory / name, img)
        entries.append({"file": name, "label": int(label)})
    (directory / "manifest.json").write_text(json.dumps(entries))


def class_counts(dataset, n_classes: int) -> np.ndarray:
    return np.bincount(_labels_of(dataset), minlength=n_classes)


def split_indices(n: int, fraction: float, seed: int) -> tuple:
    """Seeded split of range(n) into (first: round(fraction*n) indices, rest)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])
