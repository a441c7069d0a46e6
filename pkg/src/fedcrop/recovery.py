"""Trigger recovery against a frozen suspect model, and backdoor repair.

A small image-to-image generator G is trained so that the suspect classifies
clip(x + G(x)) as a chosen class while ||G(x)|| stays small. The suspect
plays the role of a fixed discriminator and is never updated. Repair retrains
the suspect on clean data where part of the images carry G(x) but keep their
true labels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageSet, TriggerPattern, choose_poison_indices
from .models import (
    ParameterVector,
    TrainConfig,
    TrainingDivergedError,
    flatten_params,
    local_train,
    materialize,
    unflatten_params,
)

log = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    target_class: Union[int, str] = "search"
    lambda_norm: float = 0.1
    norm: int = 1
    steps: int = 200
    lr: float = 0.01
    batch_size: int = 32
    width: int = 8
    seed: int = 0
    flip_threshold: float = 0.7
    warmup: float = 0.0
    preserve_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_norm < 0:
            raise ValueError("lambda_norm must be non-negative")
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        if not 0.0 <= self.flip_threshold <= 1.0:
            raise ValueError("flip_threshold must be in [0, 1]")
        if self.preserve_weight < 0:
            raise ValueError("preserve_weight must be non-negative")
        if not 0.0 <= self.warmup <= 1.0:
            raise ValueError("warmup must be in [0, 1]")

    def lambda_at(self, step: int) -> float:
        """Penalty weight ramps linearly from 0 over the first ``warmup`` share of steps."""
        ramp = self.warmup * self.steps
        if ramp <= 0:
            return self.lambda_norm
        return self.lambda_norm * min(1.0, (step + 1) / ramp)


class TriggerGenerator(nn.Module):
    """Three strided conv blocks down, three transposed conv blocks up, tanh output."""

    def __init__(self, channels: int = 3, width: int = 8):
        super().__init__()
        w = width
        self.down = nn.Sequential(
            nn.Conv2d(channels, w, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(w, channels, 4, stride=2, padding=1),
        )
        # start from an almost-zero perturbation
        with torch.no_grad():
            self.up[-1].weight.mul_(0.01)
            self.up[-1].bias.zero_()

    def forward(self, x):
        h, w = x.shape[-2:]
        out = self.up(self.down(x))
        return torch.tanh(out[..., :h, :w])


@dataclass
class RecoveredTrigger:
    generator: TriggerGenerator
    mean_pattern: TriggerPattern
    target_class: int
    flip_rate: float
    mean_norm: float
    converged: bool = True
    config: Optional[GeneratorConfig] = None

    @torch.no_grad()
    def perturbation(self, x: np.ndarray) -> np.ndarray:
        self.generator.eval()
        return self.generator(torch.from_numpy(np.asarray(x, dtype=np.float32))).numpy()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """clip(x + G(x), 0, 1)."""
        x = np.asarray(x, dtype=np.float32)
        return np.clip(x + self.perturbation(x), 0.0, 1.0)


def _as_images(probe_images) -> np.ndarray:
    x = probe_images.x if isinstance(probe_images, ImageSet) else np.asarray(probe_images, np.float32)
    if len(x) == 0:
        raise ValueError("probe image set is empty")
    return x


def _frozen(vec: ParameterVector):
    model = materialize(vec).eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def train_trigger_generator(
    suspect: ParameterVector,
    probe_images,
    target: int,
    cfg: GeneratorConfig,
    reference: Optional[ParameterVector] = None,
) -> RecoveredTrigger:
    """Fit G so the frozen suspect maps clip(x + G(x)) to ``target``.

    Loss per batch: cross-entropy to ``target`` + lambda * mean ||G(x)||_p
    with p = ``cfg.norm``; ``mean_norm`` is reported in the same norm.
    With a ``reference`` model (e.g. the global model the suspect started
    from), ``preserve_weight`` * cross-entropy of the reference to its own
    unperturbed predictions is added, so perturbations that flip any model
    towards ``target`` are discouraged and only suspect-specific shortcuts
    stay cheap.
    """
    x_all = torch.from_numpy(_as_images(probe_images))
    model = _frozen(suspect)
    n_classes = suspect.spec.n_classes
    if not 0 <= target < n_classes:
        raise ValueError(f"target {target} outside [0, {n_classes})")
    ref_model = ref_pred = None
    if reference is not None and cfg.preserve_weight > 0:
        ref_model = _frozen(reference)
        with torch.no_grad():
            ref_pred = torch.cat([ref_model(x_all[i : i + 256]).argmax(1) for i in range(0, len(x_all), 256)])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        gen_net = TriggerGenerator(x_all.shape[1], cfg.width)
    opt = torch.optim.Adam(gen_net.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(cfg.seed)
    labels = torch.full((cfg.batch_size,), target, dtype=torch.long)
    for step in range(cfg.steps):
        idx = torch.randint(len(x_all), (cfg.batch_size,), generator=rng)
        x = x_all[idx]
        delta = gen_net(x)
        stamped = torch.clamp(x + delta, 0.0, 1.0)
        norm = delta.flatten(1).norm(p=cfg.norm, dim=1).mean()
        loss = F.cross_entropy(model(stamped), labels) + cfg.lambda_at(step) * norm
        if ref_model is not None:
            loss = loss + cfg.preserve_weight * F.cross_entropy(ref_model(stamped), ref_pred[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(0, step, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()

    gen_net.eval()
    with torch.no_grad():
        deltas = torch.cat([gen_net(x_all[i : i + 256]) for i in range(0, len(x_all), 256)])
        preds = torch.cat(
            [
                model(torch.clamp(x_all[i : i + 256] + deltas[i : i + 256], 0.0, 1.0)).argmax(1)
                for i in range(0, len(x_all), 256)
            ]
        )
    flip_rate = float((preds == target).float().mean())
    mean_norm = float(deltas.flatten(1).norm(p=cfg.norm, dim=1).mean())
    return RecoveredTrigger(
        generator=gen_net,
        mean_pattern=TriggerPattern(deltas.mean(0).numpy()),
        target_class=int(target),
        flip_rate=flip_rate,
        mean_norm=mean_norm,
        converged=flip_rate >= cfg.flip_threshold,
        config=cfg,
    )


def _class_seed(seed: int, c: int) -> int:
    return int(np.random.SeedSequence([seed, c]).generate_state(1)[0])


def recover_all_classes(
    suspect: ParameterVector, probe_images, cfg: GeneratorConfig, reference: Optional[ParameterVector] = None
) -> list:
    n_classes = suspect.spec.n_classes
    return [
        train_trigger_generator(
            suspect, probe_images, c, GeneratorConfig(**{**asdict(cfg), "seed": _class_seed(cfg.seed, c)}), reference
        )
        for c in range(n_classes)
    ]


def infer_target_class(
    suspect: ParameterVector, probe_images, cfg: GeneratorConfig, reference: Optional[ParameterVector] = None
) -> tuple:
    """Smallest-norm class among those flipped at >= flip_threshold.

    If no class qualifies, the highest flip-rate class is returned with
    ``converged=False``. A fixed ``cfg.target_class`` skips the search.
    """
    if suspect.spec is None or suspect.spec.n_classes < 2:
        raise ValueError("target search needs a classifier with at least 2 classes")
    if cfg.target_class != "search":
        rec = train_trigger_generator(suspect, probe_images, int(cfg.target_class), cfg, reference)
        return rec.target_class, rec
    results = recover_all_classes(suspect, probe_images, cfg, reference)
    qualified = [r for r in results if r.converged]
    if qualified:
        best = min(qualified, key=lambda r: (r.mean_norm, r.target_class))
    else:
        best = max(results, key=lambda r: (r.flip_rate, -r.target_class))
        best.converged = False
    return best.target_class, best


def infer_shared_target(
    suspects: list, probe_images, cfg: GeneratorConfig, reference: Optional[ParameterVector] = None
) -> tuple:
    """Pick one target class for a group of suspects that share an attack goal.

    Every suspect gets a full per-class search with its own seed (``cfg.seed``
    plus the suspect's position). Flip rates and norms are averaged per class
    across suspects, then the single-suspect rule applies to the averages.
    Returns (target, [RecoveredTrigger per suspect at that target]); each
    trigger's ``converged`` flag reflects that suspect's own flip rate.
    A fixed ``cfg.target_class`` skips the search.
    """
    if not suspects:
        raise ValueError("no suspects to recover")
    if cfg.target_class != "search":
        target = int(cfg.target_class)
        recs = [
            train_trigger_generator(s, probe_images, target, GeneratorConfig(**{**asdict(cfg), "seed": cfg.seed + i}), reference)
            for i, s in enumerate(suspects)
        ]
        return target, recs
    per_suspect = [
        recover_all_classes(s, probe_images, GeneratorConfig(**{**asdict(cfg), "seed": cfg.seed + i}), reference)
        for i, s in enumerate(suspects)
    ]
    n_classes = len(per_suspect[0])
    flip = np.array([[r.flip_rate for r in rs] for rs in per_suspect]).mean(0)
    norm = np.array([[r.mean_norm for r in rs] for rs in per_suspect]).mean(0)
    qualified = [c for c in range(n_classes) if flip[c] >= cfg.flip_threshold]
    if qualified:
        target = min(qualified, key=lambda c: (norm[c], c))
    else:
        target = max(range(n_classes), key=lambda c: (flip[c], -c))
    return target, [rs[target] for rs in per_suspect]


def repair_model(
    suspect: ParameterVector,
    clean_set: ImageSet,
    recovered: RecoveredTrigger,
    cfg: TrainConfig,
    augment_fraction: float = 0.5,
) -> ParameterVector:
    """Fine-tune on ``clean_set`` with a share of images stamped by G, labels untouched."""
    if len(clean_set) == 0:
        raise ValueError("repair needs a non-empty clean set")
    if not 0.0 <= augment_fraction <= 1.0:
        raise ValueError("augment_fraction must be in [0, 1]")
    if cfg.epochs == 0:
        return suspect.with_values(suspect.values.copy())
    idx = choose_poison_indices(len(clean_set), augment_fraction, cfg.seed)
    x = clean_set.x.copy()
    if len(idx):
        x[idx] = recovered.apply(x[idx])
    return local_train(suspect, ImageSet(x, clean_set.y, clean_set.n_classes), cfg)


# --- persistence -------------------------------------------------------------


def save_recovered(out_dir, rec: RecoveredTrigger) -> Path:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pattern = rec.mean_pattern.delta
    np.save(out / "mean_pattern.npy", pattern)
    preview = np.clip((pattern.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    if preview.shape[2] == 1:
        preview = preview[..., 0]
    Image.fromarray(preview).save(out / "mean_pattern.png")
    save_checkpoint(out / "generator.fcrop", flatten_params(rec.generator), {"channels": pattern.shape[0]})
    sidecar = {
        "target_class": rec.target_class,
        "flip_rate": rec.flip_rate,
        "mean_norm": rec.mean_norm,
        "converged": rec.converged,
        "config": asdict(rec.config) if rec.config is not None else None,
    }
    (out / "trigger.json").write_text(json.dumps(sidecar, indent=2))
    return out


def load_recovered(out_dir) -> RecoveredTrigger:
    out = Path(out_dir)
    meta = json.loads((out / "trigger.json").read_text())
    cfg = GeneratorConfig(**meta["config"]) if meta.get("config") else GeneratorConfig()
    vec, extra = load_checkpoint(out / "generator.fcrop")
    gen_net = TriggerGenerator(extra["channels"], cfg.width)
    unflatten_params(vec, gen_net)
    return RecoveredTrigger(
        generator=gen_net.eval(),
        mean_pattern=TriggerPattern(np.load(out / "mean_pattern.npy")),
        target_class=meta["target_class"],
        flip_rate=meta["flip_rate"],
        mean_norm=meta["mean_norm"],
        converged=meta["converged"],
        config=cfg,
    )
