"""Contrastive detection of backdoored client updates.

The server simulates benign and poisoned clients on its public data, embeds
their parameter deltas with an InfoNCE-trained encoder and fits a linear head
on top. Incoming updates are scored with the same pipeline.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import ClientUpdate, fedavg
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ImageSet, PoisonSpec, TriggerPattern, choose_poison_indices, poison_dataset
from .models import (
    ModelSpec,
    ParameterVector,
    TrainConfig,
    TrainingDivergedError,
    default_feature_slice,
    flatten_params,
    init_params,
    local_train,
    unflatten_params,
)

log = logging.getLogger(__name__)

POISONED, BENIGN = "poisoned", "benign"


@dataclass
class DetectorConfig:
    tau: float = 0.5
    d_emb: int = 64
    hidden: tuple = (256, 128)
    feature_slice: Optional[list] = None
    epochs: int = 10
    lr: float = 1e-3
    pairs_per_batch: int = 8
    classifier_epochs: int = 300
    classifier_lr: float = 0.05
    threshold: float = 0.5
    input_dropout: float = 0.0
    input_noise: float = 0.0
    mixup: float = 0.0
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class SimPool:
    models: list  # (ParameterVector, POISONED | BENIGN)
    references: list  # global model each simulated client started from
    trigger_used: TriggerPattern
    public_set_id: str = "public"

    def __post_init__(self):
        counts = {lab: sum(1 for _, l in self.models if l == lab) for lab in (POISONED, BENIGN)}
        if min(counts.values()) < 2:
            raise ValueError(f"sim pool needs >= 2 models per label, got {counts}")
        if len(self.references) != len(self.models):
            raise ValueError("one reference model per pool entry is required")

    def __len__(self) -> int:
        return len(self.models)

    @property
    def labels(self) -> np.ndarray:
        return np.array([1 if lab == POISONED else 0 for _, lab in self.models])


@dataclass
class DetectionVerdict:
    client_id: int
    label: str  # "benign" | "suspect"
    score: float

    @property
    def suspect(self) -> bool:
        return self.label == "suspect"


def skewed_sample(dataset: ImageSet, size: int, alpha: float, rng: np.random.Generator) -> ImageSet:
    """Draw ``size`` samples (with replacement) under Dirichlet(alpha) class proportions."""
    present = np.unique(dataset.y)
    props = rng.dirichlet(np.full(len(present), alpha))
    counts = rng.multinomial(size, props)
    idx = [
        rng.choice(np.flatnonzero(dataset.y == c), size=k, replace=True)
        for c, k in zip(present, counts)
        if k
    ]
    return dataset.subset(np.concatenate(idx))


def build_sim_pool(
    public_set: ImageSet,
    trigger: TriggerPattern,
    n_sim: int,
    attacker_fraction: float,
    rounds: int,
    cfg: TrainConfig,
    model_spec: ModelSpec,
    poison_fraction: float = 0.5,
    target_label: Optional[int] = 0,
    alpha: float = 0.7,
    shard_size: int = 500,
    seed: int = 0,
    initial: Optional[ParameterVector] = None,
) -> SimPool:
    """Train simulated poisoned/benign clients on the public set for ``rounds`` rounds.

    Attackers train on a poisoned copy of their shard; benign clients train on
    the shard minus the samples an attacker would have poisoned. The simulated
    global model advances by averaging the benign clients. ``target_label=None``
    gives each simulated attacker a random target class.

    ``initial`` should be the model the server will broadcast in round 0:
    parameter deltas are only comparable between networks sharing an
    initialisation (hidden units have no canonical order otherwise).
    """
    if len(public_set) == 0:
        raise ValueError("public set is empty")
    if not 0 < attacker_fraction < 1:
        raise ValueError("attacker_fraction must be in (0, 1)")
    n_poison = int(round(attacker_fraction * n_sim))
    if min(n_poison, n_sim - n_poison) < 2:
        raise ValueError(
            f"n_sim={n_sim} with attacker_fraction={attacker_fraction} leaves fewer than 2 models per label"
        )
    rng = np.random.default_rng(seed)
    attackers = set(rng.choice(n_sim, size=n_poison, replace=False).tolist())
    init_seed = int(rng.integers(2**31))
    global_params = initial if initial is not None else init_params(model_spec, init_seed)
    models, refs = [], []
    for t in range(rounds):
        benign_updates = []
        for j in range(n_sim):
            shard = skewed_sample(public_set, shard_size, alpha, rng)
            local_seed = int(rng.integers(2**31))
            poison_seed = int(rng.integers(2**31))
            train_cfg = TrainConfig(**{**cfg.__dict__, "seed": local_seed})
            if j in attackers:
                target = target_label if target_label is not None else int(rng.integers(public_set.n_classes))
                spec = PoisonSpec(trigger, target, poison_fraction)
                vec = local_train(global_params, poison_dataset(shard, spec, poison_seed), train_cfg)
                models.append((vec, POISONED))
            else:
                held = choose_poison_indices(len(shard), poison_fraction, poison_seed)
                clean = shard.subset(np.setdiff1d(np.arange(len(shard)), held))
                vec = local_train(global_params, clean, train_cfg)
                models.append((vec, BENIGN))
                benign_updates.append(ClientUpdate(j, vec, len(clean)))
            refs.append(global_params)
        global_params = fedavg(benign_updates)
    return SimPool(models, refs, trigger)


def make_pairs(pool: SimPool) -> tuple:
    """Within-label index pairs are positives, cross-label pairs negatives."""
    poisoned = [i for i, (_, lab) in enumerate(pool.models) if lab == POISONED]
    benign = [i for i, (_, lab) in enumerate(pool.models) if lab == BENIGN]
    positives = list(itertools.combinations(poisoned, 2)) + list(itertools.combinations(benign, 2))
    negatives = [(p, b) for p in poisoned for b in benign]
    return positives, negatives


# --- features and encoder ----------------------------------------------------


def update_features(
    params: ParameterVector, reference: Optional[ParameterVector], feature_slice: Sequence[str]
) -> np.ndarray:
    """Delta of the selected layers, scaled to unit norm per module.

    Layers sharing a module prefix (``fc2.weight``/``fc2.bias``) are normalised
    together, so each module contributes equally whatever its size.
    """
    sl = params.slices()
    missing = [n for n in feature_slice if n not in sl]
    if missing:
        raise KeyError(f"layers not in parameter layout: {missing}")
    if reference is not None and not reference.compatible(params):
        raise ValueError("reference layout differs from the update")
    modules: dict = {}
    for name in feature_slice:
        d = np.asarray(params.values[sl[name]], dtype=np.float64)
        if reference is not None:
            d = d - reference.values[sl[name]]
        modules.setdefault(name.rsplit(".", 1)[0], []).append(d)
    parts = []
    for chunks in modules.values():
        d = np.concatenate(chunks)
        norm = np.linalg.norm(d)
        parts.append(d / norm if norm > 0 else d)
    return np.concatenate(parts).astype(np.float32)


class Projector(nn.Module):
    """Three fully connected layers mapping standardised features to the unit sphere."""

    def __init__(self, in_dim: int, hidden=(256, 128), d_emb: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], d_emb)
        self.register_buffer("mean", torch.zeros(in_dim))
        self.register_buffer("std", torch.ones(in_dim))

    def forward(self, x):
        x = (x - self.mean) / self.std
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return F.normalize(self.fc3(x), dim=-1)


@dataclass
class Encoder:
    net: Projector
    feature_slice: list
    cfg: DetectorConfig
    loss_history: list = field(default_factory=list)

    def features(self, params, reference=None) -> np.ndarray:
        return update_features(params, reference, self.feature_slice)

    @torch.no_grad()
    def embed_features(self, feats: np.ndarray) -> np.ndarray:
        self.net.eval()
        return self.net(torch.from_numpy(np.asarray(feats, dtype=np.float32))).numpy()


def embed(encoder: Encoder, params: ParameterVector, cfg: Optional[DetectorConfig] = None, reference=None) -> np.ndarray:
    """Unit-norm embedding of one update (delta against ``reference`` when given)."""
    return encoder.embed_features(encoder.features(params, reference)[None])[0]


def info_nce_loss(anchor, positive, negatives, tau: float) -> float:
    """Temperature-scaled InfoNCE with cosine similarity; positive pair in the numerator."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.size == 0:
        raise ValueError("at least one negative is required")
    a = np.asarray(anchor, dtype=np.float64)

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    logits = np.array([cos(a, positive)] + [cos(a, n) for n in negatives]) / tau
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[0])


def info_nce_batch(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float):
    """Batched InfoNCE on unit vectors: anchor/positive (B, d), negatives (B, K, d)."""
    pos = (anchor * positive).sum(-1, keepdim=True)
    neg = torch.einsum("bd,bkd->bk", anchor, negatives)
    logits = torch.cat([pos, neg], dim=1) / tau
    return -F.log_softmax(logits, dim=1)[:, 0]


def _pool_features(pool: SimPool, feature_slice) -> np.ndarray:
    return np.stack([update_features(v, r, feature_slice) for (v, _), r in zip(pool.models, pool.references)])


def _new_encoder(in_dim: int, feature_slice, cfg: DetectorConfig) -> Encoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        net = Projector(in_dim, cfg.hidden, cfg.d_emb)
    return Encoder(net, list(feature_slice), cfg)


def _augment(feats, labels, cfg: DetectorConfig, scale, gen):
    """Random views: within-label mixup, feature dropout and Gaussian noise."""
    x = feats
    if cfg.mixup > 0:
        partner = torch.empty(len(x), dtype=torch.long)
        for lab in (0, 1):
            members = torch.nonzero(labels == lab).squeeze(1)
            pick = torch.randint(len(members), (len(members),), generator=gen)
            partner[members] = members[pick]
        lam = 1.0 - cfg.mixup * torch.rand(len(x), 1, generator=gen)
        x = lam * x + (1.0 - lam) * x[partner]
    if cfg.input_noise > 0:
        x = x + cfg.input_noise * scale * torch.randn(x.shape, generator=gen)
    if cfg.input_dropout > 0:
        keep = (torch.rand(x.shape, generator=gen) >= cfg.input_dropout).float()
        mean = feats.mean(0)
        x = mean + (x - mean) * keep / (1.0 - cfg.input_dropout)
    return x


def train_contrastive_encoder(pool: SimPool, cfg: DetectorConfig) -> Encoder:
    feature_slice = cfg.feature_slice or default_feature_slice(pool.models[0][0].layout)
    feats = torch.from_numpy(_pool_features(pool, feature_slice))
    enc = _new_encoder(feats.shape[1], feature_slice, cfg)
    # one shared scale: per-feature scaling would blow up near-constant coordinates
    enc.net.mean.copy_(feats.mean(0))
    enc.net.std.fill_(float((feats - feats.mean(0)).pow(2).sum(1).mean().sqrt()) / feats.shape[1] ** 0.5 + 1e-12)
    if cfg.epochs == 0:
        return enc

    labels = pool.labels
    labels_t = torch.from_numpy(labels)
    positives, _ = make_pairs(pool)
    pos = torch.tensor(positives)
    opposite = {lab: torch.from_numpy(np.flatnonzero(labels != lab)) for lab in (0, 1)}
    k = min(len(v) for v in opposite.values())
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(enc.net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scale = enc.net.std[0]
    enc.net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(pos), generator=gen)
        total = 0.0
        for b, i in enumerate(range(0, len(pos), cfg.pairs_per_batch)):
            batch = pos[order[i : i + cfg.pairs_per_batch]]
            # random orientation so both members serve as anchors
            flip = torch.rand(len(batch), generator=gen) < 0.5
            batch = torch.where(flip[:, None], batch.flip(1), batch)
            a_idx, p_idx = batch[:, 0], batch[:, 1]
            neg_idx = torch.stack(
                [opposite[int(labels[a])][torch.randperm(len(opposite[int(labels[a])]), generator=gen)[:k]] for a in a_idx]
            )
            z = enc.net(_augment(feats, labels_t, cfg, scale, gen))
            loss = info_nce_batch(z[a_idx], z[p_idx], z[neg_idx], cfg.tau).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        enc.loss_history.append(total / len(pos))
    enc.net.eval()
    return enc


@dataclass
class IdentifyMod:
    """Frozen encoder plus a logistic head giving the suspect probability."""

    encoder: Encoder
    weight: np.ndarray
    bias: float
    train_accuracy: float = float("nan")

    def score_features(self, feats: np.ndarray) -> np.ndarray:
        z = self.encoder.embed_features(feats)
        logits = z @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(logits, -60, 60)))

    def score(self, params: ParameterVector, reference: Optional[ParameterVector] = None) -> float:
        return float(self.score_features(self.encoder.features(params, reference)[None])[0])

    def score_pool(self, pool: SimPool) -> np.ndarray:
        return self.score_features(_pool_features(pool, self.encoder.feature_slice))


def train_classifier_on_embeddings(
    z: np.ndarray, labels: np.ndarray, epochs: int, lr: float, seed: int = 0
) -> tuple:
    """Logistic regression by full-batch gradient descent; returns (weight, bias, train_acc)."""
    zt = torch.from_numpy(np.asarray(z, dtype=np.float32))
    yt = torch.from_numpy(np.asarray(labels, dtype=np.float32))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = nn.Linear(zt.shape[1], 1)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=0.9)
    for epoch in range(epochs):
        loss = F.binary_cross_entropy_with_logits(head(zt).squeeze(1), yt)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(epoch, 0, loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (head(zt).squeeze(1) > 0).float()
    acc = float((pred == yt).float().mean())
    return head.weight.detach().numpy()[0].astype(np.float64), float(head.bias.detach()[0]), acc


def train_classifier(encoder: Encoder, pool: SimPool, epochs: Optional[int] = None) -> IdentifyMod:
    cfg = encoder.cfg
    z = encoder.embed_features(_pool_features(pool, encoder.feature_slice))
    w, b, acc = train_classifier_on_embeddings(
        z, pool.labels, cfg.classifier_epochs if epochs is None else epochs, cfg.classifier_lr, cfg.seed
    )
    return IdentifyMod(encoder, w, b, acc)


def classify_updates(
    identify_mod: IdentifyMod,
    updates: Sequence[ClientUpdate],
    threshold: float,
    reference: Optional[ParameterVector] = None,
) -> list:
    """Suspect iff score >= threshold. ``reference`` is the global model the clients started from."""
    verdicts = []
    for u in updates:
        s = identify_mod.score(u.params, reference)
        verdicts.append(DetectionVerdict(u.client_id, "suspect" if s >= threshold else "benign", s))
    return verdicts


def fit_detector(pool: SimPool, cfg: DetectorConfig) -> IdentifyMod:
    encoder = train_contrastive_encoder(pool, cfg)
    return train_classifier(encoder, pool)


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if not len(pos) or not len(neg):
        raise ValueError("ROC-AUC needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# --- persistence -------------------------------------------------------------


def save_detector(path, mod: IdentifyMod):
    vec = flatten_params(mod.encoder.net)
    head = np.concatenate([mod.weight, [mod.bias]])
    extra = [
        ("_input.mean", tuple(mod.encoder.net.mean.shape)),
        ("_input.std", tuple(mod.encoder.net.std.shape)),
        ("_head", (len(head),)),
    ]
    values = np.concatenate(
        [vec.values, mod.encoder.net.mean.numpy(), mod.encoder.net.std.numpy(), head]
    ).astype(np.float32)
    cfg = mod.encoder.cfg
    meta = {
        "tau": cfg.tau,
        "d_emb": cfg.d_emb,
        "hidden": list(cfg.hidden),
        "feature_slice": mod.encoder.feature_slice,
        "threshold": cfg.threshold,
        "input_dim": int(mod.encoder.net.mean.shape[0]),
        "seed": cfg.seed,
        "train_accuracy": mod.train_accuracy,
    }
    return save_checkpoint(path, ParameterVector(values, list(vec.layout) + extra), meta)


def load_detector(path) -> IdentifyMod:
    vec, meta = load_checkpoint(path)
    cfg = DetectorConfig(
        tau=meta["tau"],
        d_emb=meta["d_emb"],
        hidden=tuple(meta["hidden"]),
        feature_slice=meta["feature_slice"],
        threshold=meta["threshold"],
        seed=meta.get("seed", 0),
    )
    enc = _new_encoder(meta["input_dim"], meta["feature_slice"], cfg)
    sl = vec.slices()
    net_layout = [(n, s) for n, s in vec.layout if not n.startswith("_")]
    net_values = np.concatenate([vec.values[sl[n]] for n, _ in net_layout])
    unflatten_params(ParameterVector(net_values, net_layout), enc.net)
    enc.net.mean.copy_(torch.from_numpy(vec.values[sl["_input.mean"]].copy()))
    enc.net.std.copy_(torch.from_numpy(vec.values[sl["_input.std"]].copy()))
    head = vec.values[sl["_head"]].astype(np.float64)
    return IdentifyMod(enc, head[:-1], float(head[-1]), meta.get("train_accuracy", float("nan")))
