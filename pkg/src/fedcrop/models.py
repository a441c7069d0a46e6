"""Classifier registry, flat parameter codec, local SGD training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageSet, PoisonSpec, inject_trigger


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class ModelSpec:
    name: str = "smallcnn"
    in_channels: int = 3
    image_size: int = 16
    n_classes: int = 10

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "n_classes": self.n_classes,
        }


class SmallCNN(nn.Module):
    """Two conv blocks and two dense layers."""

    def __init__(self, in_channels=3, image_size=16, n_classes=10, width=16, hidden=128):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        side = image_size // 4
        self.fc1 = nn.Linear(2 * width * side * side, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return self.fc2(x)


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.gn1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.gn2 = nn.GroupNorm(min(8, cout), cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.GroupNorm(min(8, cout), cout)
            )

    def forward(self, x):
        out = F.relu(self.gn1(self.conv1(x)))
        out = self.gn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class ResNet18Lite(nn.Module):
    """18-layer residual net, 3x3 kernels, stride/padding 1, no pooling layers.

    Downsampling is done with strided convolutions and the classifier reads
    the flattened final feature map. GroupNorm keeps every tensor a trainable
    parameter, so the flat codec covers the whole state.
    """

    def __init__(self, in_channels=3, image_size=32, n_classes=10, widths=(16, 32, 64, 128)):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, stride=1, padding=1, bias=False)
        self.gn1 = nn.GroupNorm(min(8, widths[0]), widths[0])
        blocks, cin, side = [], widths[0], image_size
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            side = (side + stride - 1) // stride
            blocks += [_Block(cin, w, stride), _Block(w, w, 1)]
            cin = w
        self.layers = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin * side * side, n_classes)

    def forward(self, x):
        x = F.relu(self.gn1(self.conv1(x)))
        return self.fc(self.layers(x).flatten(1))


MODEL_REGISTRY: dict = {"smallcnn": SmallCNN, "resnet18-lite": ResNet18Lite}


def build_model(spec: ModelSpec, seed: Optional[int] = None) -> nn.Module:
    cls = MODEL_REGISTRY.get(spec.name)
    if cls is None:
        raise KeyError(f"unknown architecture {spec.name!r}; known: {sorted(MODEL_REGISTRY)}")
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        model = cls(spec.in_channels, spec.image_size, spec.n_classes)
    model.spec = spec
    return model


# --- parameter codec ---------------------------------------------------------


@dataclass
class ParameterVector:
    """Flat model weights plus the (name, shape) layout that produced them."""

    values: np.ndarray
    layout: tuple
    spec: Optional[ModelSpec] = field(default=None, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.layout = tuple((name, tuple(shape)) for name, shape in self.layout)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.ndim != 1 or len(self.values) != expected:
            raise ValueError(f"layout describes {expected} values, got shape {self.values.shape}")

    def __len__(self) -> int:
        return len(self.values)

    def compatible(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values), self.layout, self.spec)

    def slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    def select(self, names) -> np.ndarray:
        """Concatenate the named layers' values."""
        sl = self.slices()
        missing = [n for n in names if n not in sl]
        if missing:
            raise KeyError(f"layers not in layout: {missing}")
        return np.concatenate([self.values[sl[n]] for n in names])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def flatten_params(model: nn.Module) -> ParameterVector:
    named = list(model.named_parameters())
    layout = [(name, tuple(p.shape)) for name, p in named]
    if not named:
        return ParameterVector(np.zeros(0, np.float32), layout, getattr(model, "spec", None))
    values = torch.cat([p.detach().reshape(-1) for _, p in named]).cpu().numpy().copy()
    return ParameterVector(values, layout, getattr(model, "spec", None))


def unflatten_params(vec: ParameterVector, model: nn.Module) -> nn.Module:
    layout = tuple((name, tuple(p.shape)) for name, p in model.named_parameters())
    if layout != vec.layout:
        raise ValueError("parameter layout does not match the model architecture")
    sl = vec.slices()
    with torch.no_grad():
        for name, p in model.named_parameters():
            chunk = torch.from_numpy(np.ascontiguousarray(vec.values[sl[name]]))
            p.copy_(chunk.to(p.dtype).reshape(p.shape))
    return model


def materialize(vec: ParameterVector) -> nn.Module:
    if vec.spec is None:
        raise ValueError("ParameterVector carries no ModelSpec; cannot rebuild the model")
    return unflatten_params(vec, build_model(vec.spec))


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    return flatten_params(build_model(spec, seed))


def default_feature_slice(layout) -> list:
    """Layer names of the first and the last module in ``layout``."""
    names = [name for name, _ in layout]
    first = names[0].rsplit(".", 1)[0]
    last = names[-1].rsplit(".", 1)[0]
    return [n for n in names if n.rsplit(".", 1)[0] == first] + [
        n for n in names if n.rsplit(".", 1)[0] == last
    ]


# --- training / evaluation ---------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def local_train(
    start: ParameterVector,
    data: ImageSet,
    cfg: TrainConfig,
    loss_log: Optional[list] = None,
) -> ParameterVector:
    """Minibatch SGD with cross-entropy from ``start``.

    Shuffling uses a generator seeded from ``cfg.seed``, so the result is a
    function of the arguments only. Mean loss per epoch goes to ``loss_log``.
    """
    if cfg.epochs == 0:
        return start.with_values(start.values.copy())
    if len(data) == 0:
        raise ValueError("local_train needs a non-empty dataset")
    model = materialize(start)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    x = torch.from_numpy(data.x)
    y = torch.from_numpy(data.y)
    gen = torch.Generator().manual_seed(int(cfg.seed) % (2**63))
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(y), generator=gen)
        total, seen = 0.0, 0
        for b, i in enumerate(range(0, len(y), cfg.batch_size)):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        if loss_log is not None:
            loss_log.append(total / seen)
    out = flatten_params(model)
    if not out.is_finite():
        raise TrainingDivergedError(cfg.epochs - 1, -1, float("nan"))
    return out


@torch.no_grad()
def predict(params: ParameterVector, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model = materialize(params).eval()
    xt = torch.from_numpy(np.asarray(x, dtype=np.float32))
    out = [model(xt[i : i + batch_size]).argmax(1) for i in range(0, len(xt), batch_size)]
    return torch.cat(out).numpy()


def mean_loss(params: ParameterVector, data: ImageSet, batch_size: int = 512) -> float:
    model = materialize(params).eval()
    x, y = torch.from_numpy(data.x), torch.from_numpy(data.y)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(y), batch_size):
            total += float(F.cross_entropy(model(x[i : i + batch_size]), y[i : i + batch_size], reduction="sum"))
    return total / len(y)


def evaluate(params: ParameterVector, test_set: ImageSet) -> float:
    """Top-1 accuracy."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    return float(np.mean(predict(params, test_set.x) == test_set.y))


def backdoor_accuracy(params: ParameterVector, test_set: ImageSet, spec: PoisonSpec) -> float:
    """Share of triggered non-target samples classified as the target label."""
    keep = test_set.y != spec.target_label
    if not keep.any():
        raise ValueError("every test sample already carries the target label")
    triggered = inject_trigger(test_set.x[keep], spec.trigger)
    return float(np.mean(predict(params, triggered) == spec.target_label))


def constant_classifier(spec: ModelSpec, label: int) -> ParameterVector:
    """All-zero weights except the output bias, which always picks ``label``."""
    vec = init_params(spec, 0)
    values = np.zeros_like(vec.values)
    name, shape = vec.layout[-1]
    if len(shape) != 1:
        raise ValueError("last layer of the layout is not a bias vector")
    values[vec.slices()[name]][label] = 1.0
    return vec.with_values(values)

