"""Federated rounds end-to-end: local training, attack, defense, metrics, outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregation import (
    AGGREGATORS,
    ClientUpdate,
    default_krum_f,
    default_trim_k,
    fang_lfr,
    fedavg,
    gancrop_merge,
    krum,
    trimmed_mean,
)
from .checkpoint import save_checkpoint
from .data import (
    ImageSet,
    PoisonSpec,
    TriggerPattern,
    dirichlet_partition,
    load_cifar10,
    load_synthetic,
    poison_dataset,
    split_indices,
)
from .detector import (
    DetectorConfig,
    IdentifyMod,
    build_sim_pool,
    classify_updates,
    fit_detector,
    load_detector,
)
from .models import ModelSpec, ParameterVector, TrainConfig, backdoor_accuracy, evaluate, init_params, local_train
from .recovery import GeneratorConfig, infer_shared_target, repair_model

log = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "round",
    "main_acc",
    "backdoor_acc",
    "n_suspects",
    "true_positives",
    "false_positives",
    "t_train",
    "t_detect",
    "t_recover",
    "t_aggregate",
    "params_digest",
]
TIMING_COLUMNS = ("t_train", "t_detect", "t_recover", "t_aggregate")
SUBMODEL_COLUMNS = [
    "round",
    "benign_main_acc",
    "benign_backdoor_acc",
    "repaired_main_acc",
    "repaired_backdoor_acc",
    "n_benign",
    "n_repaired",
    "n_dropped",
]


class RoundError(RuntimeError):
    def __init__(self, round_idx: int, cause: Exception):
        super().__init__(f"round {round_idx} failed: {cause}")
        self.round_idx = round_idx


def derive_seed(*keys) -> int:
    """Stable 31-bit seed from a tuple of non-negative ints."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0] >> 1)


def params_digest(vec: ParameterVector) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec.values, dtype=np.float32).tobytes()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    n_clients: int = 10
    attacker_fraction: float = 0.3
    rounds: int = 20
    aggregator: str = "fedavg"
    target_label: int = 0
    poison_fraction: float = 0.5
    trigger_size: int = 3
    alpha: float = 0.7
    partition_seed: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(steps=100, lr=0.02, warmup=0.5))
    repair: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.1, epochs=5))
    augment_fraction: float = 0.8
    dataset: str = "synthetic"
    data_root: Optional[str] = None
    architecture: str = "smallcnn"
    image_size: int = 16
    n_train: Optional[int] = 5000
    n_test: Optional[int] = 3000
    public_fraction: float = 0.2
    n_probe: int = 256
    sim_clients: int = 20
    sim_attacker_fraction: float = 0.5
    sim_rounds: int = 5
    sim_shard_size: int = 500
    detector_path: Optional[str] = None
    krum_f: Optional[int] = None
    trim_k: Optional[int] = None
    fang_reject: Optional[int] = None
    checkpoint_every: int = 0
    seed: int = 0
    profile: str = "desk"

    def __post_init__(self):
        for name, kind in (("train", TrainConfig), ("repair", TrainConfig), ("detector", DetectorConfig), ("generator", GeneratorConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, kind(**value))
        if isinstance(self.detector.hidden, list):
            self.detector.hidden = tuple(self.detector.hidden)
        if not 0.0 <= self.attacker_fraction < 1.0:
            raise ValueError("attacker_fraction must be in [0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATORS}")

    @property
    def n_attackers(self) -> int:
        return int(round(self.attacker_fraction * self.n_clients))

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.architecture, 3, self.image_size, 10)

    @property
    def poison(self) -> PoisonSpec:
        shape = (self.model_spec.in_channels, self.image_size, self.image_size)
        return PoisonSpec(TriggerPattern.patch(shape, size=self.trigger_size), self.target_label, self.poison_fraction)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["detector"]["hidden"] = list(self.detector.hidden)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        base = PROFILES[data.get("profile", "desk")]()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged = base.to_dict()
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        return cls(**merged)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def desk_profile(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(profile="desk")
    return cfg.replace(**overrides) if overrides else cfg


def paper_profile(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        n_clients=40,
        rounds=50,
        train=TrainConfig(learning_rate=0.1, epochs=4),
        dataset="cifar10",
        architecture="resnet18-lite",
        image_size=32,
        n_train=None,
        n_test=None,
        sim_shard_size=1000,
        profile="paper",
    )
    return cfg.replace(**overrides) if overrides else cfg


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def seed_from_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """Apply the FEDCROP_SEED override, if set."""
    value = os.environ.get("FEDCROP_SEED")
    if value is None or value == "":
        return cfg
    return cfg.replace(seed=int(value))


# --- setup -------------------------------------------------------------------


@dataclass
class ExperimentState:
    cfg: ExperimentConfig
    train_set: ImageSet
    eval_set: ImageSet
    public_set: ImageSet
    shards: list
    attackers: frozenset
    initial: ParameterVector
    detector: Optional[IdentifyMod] = None

    @property
    def poison(self) -> PoisonSpec:
        return self.cfg.poison


def load_data(cfg: ExperimentConfig) -> tuple:
    if cfg.dataset == "synthetic":
        return load_synthetic(cfg.n_train or 5000, cfg.n_test or 3000, seed=cfg.seed, image_size=cfg.image_size)
    if cfg.dataset == "cifar10":
        if cfg.data_root is None:
            raise ValueError("dataset 'cifar10' needs data_root")
        return load_cifar10(cfg.data_root, cfg.n_train, cfg.n_test, seed=cfg.seed)
    raise ValueError(f"unknown dataset {cfg.dataset!r}")


_DETECTOR_CACHE: dict = {}


def _detector_key(cfg: ExperimentConfig) -> str:
    keys = (
        "seed", "dataset", "data_root", "architecture", "image_size", "n_train", "n_test", "public_fraction",
        "target_label", "poison_fraction", "trigger_size", "alpha", "sim_clients", "sim_attacker_fraction",
        "sim_rounds", "sim_shard_size",
    )
    d = cfg.to_dict()
    return json.dumps({k: d[k] for k in keys} | {"train": d["train"], "detector": d["detector"]}, sort_keys=True)


def train_detector(cfg: ExperimentConfig, public_set: ImageSet, initial: ParameterVector) -> IdentifyMod:
    """Build the simulated pool on the public set and fit the detector."""
    key = _detector_key(cfg)
    if key in _DETECTOR_CACHE:
        return _DETECTOR_CACHE[key]
    pool = build_sim_pool(
        public_set,
        cfg.poison.trigger,
        cfg.sim_clients,
        cfg.sim_attacker_fraction,
        cfg.sim_rounds,
        cfg.train,
        cfg.model_spec,
        poison_fraction=cfg.poison_fraction,
        target_label=cfg.target_label,
        alpha=cfg.alpha,
        shard_size=cfg.sim_shard_size,
        seed=derive_seed(cfg.seed, 3),
        initial=initial,
    )
    mod = fit_detector(pool, cfg.detector)
    _DETECTOR_CACHE[key] = mod
    return mod


def setup(cfg: ExperimentConfig) -> ExperimentState:
    train_set, test_set = load_data(cfg)
    pub_idx, eval_idx = split_indices(len(test_set), cfg.public_fraction, derive_seed(cfg.seed, 1))
    public_set, eval_set = test_set.subset(pub_idx), test_set.subset(eval_idx)
    part_seed = cfg.seed if cfg.partition_seed is None else cfg.partition_seed
    plan = dirichlet_partition(train_set, cfg.n_clients, cfg.alpha, part_seed)
    rng = np.random.default_rng(derive_seed(cfg.seed, 2))
    attackers = frozenset(rng.choice(cfg.n_clients, size=cfg.n_attackers, replace=False).tolist())
    shards = []
    for i, idx in enumerate(plan.assignments):
        shard = train_set.subset(idx)
        if i in attackers:
            shard = poison_dataset(shard, cfg.poison, derive_seed(cfg.seed, 4, i))
        shards.append(shard)
    initial = init_params(cfg.model_spec, derive_seed(cfg.seed, 0))
    state = ExperimentState(cfg, train_set, eval_set, public_set, shards, attackers, initial)
    if cfg.aggregator == "gancrop":
        if cfg.detector_path and Path(cfg.detector_path).exists():
            state.detector = load_detector(cfg.detector_path)
        else:
            state.detector = train_detector(cfg, public_set, initial)
    return state


# --- rounds ------------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    main_acc: float
    backdoor_acc: float
    verdicts: list = field(default_factory=list)
    wall_time: dict = field(default_factory=dict)
    global_params_digest: str = ""
    true_positives: int = 0
    false_positives: int = 0
    submodels: Optional[dict] = None
    fedavg_backdoor_acc: Optional[float] = None

    def __post_init__(self):
        for name in ("main_acc", "backdoor_acc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def n_suspects(self) -> int:
        return sum(1 for v in self.verdicts if v.suspect)

    @property
    def total_time(self) -> float:
        return float(sum(self.wall_time.values()))

    def row(self) -> dict:
        return {
            "round": self.round,
            "main_acc": f"{self.main_acc:.6f}",
            "backdoor_acc": f"{self.backdoor_acc:.6f}",
            "n_suspects": self.n_suspects,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            **{k: f"{self.wall_time.get(k, 0.0):.4f}" for k in TIMING_COLUMNS},
            "params_digest": self.global_params_digest,
        }

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "main_acc": self.main_acc,
            "backdoor_acc": self.backdoor_acc,
            "verdicts": [asdict(v) for v in self.verdicts],
            "wall_time": self.wall_time,
            "global_params_digest": self.global_params_digest,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "submodels": self.submodels,
            "fedavg_backdoor_acc": self.fedavg_backdoor_acc,
        }


def _local_updates(global_params: ParameterVector, state: ExperimentState, round_idx: int) -> list:
    cfg = state.cfg
    out = []
    for i, shard in enumerate(state.shards):
        t0 = time.perf_counter()
        train_cfg = TrainConfig(**{**asdict(cfg.train), "seed": derive_seed(cfg.seed, 5, round_idx, i)})
        vec = local_train(global_params, shard, train_cfg)
        out.append(ClientUpdate(i, vec, len(shard), time.perf_counter() - t0))
    return out


def _repair_all(suspects: list, global_params: ParameterVector, state: ExperimentState, round_idx: int) -> tuple:
    """Recover and repair each suspect; returns (repaired updates, dropped client ids).

    All suspects of a round share one inferred target class. The global model
    the suspects started from serves as the recovery reference.
    """
    cfg = state.cfg
    if not suspects:
        return [], []
    probes = state.public_set.x[: cfg.n_probe]
    gen_cfg = GeneratorConfig(**{**asdict(cfg.generator), "seed": derive_seed(cfg.seed, 6, round_idx)})
    target, recs = infer_shared_target([u.params for u in suspects], probes, gen_cfg, reference=global_params)
    repaired, dropped = [], []
    for u, rec in zip(suspects, recs):
        if not rec.converged:
            log.info("round %d: recovery for client %d unconverged (class %d, flip %.2f), dropped", round_idx, u.client_id, target, rec.flip_rate)
            dropped.append(u.client_id)
            continue
        fix_cfg = TrainConfig(**{**asdict(cfg.repair), "seed": derive_seed(cfg.seed, 7, round_idx, u.client_id)})
        fixed = repair_model(u.params, state.public_set, rec, fix_cfg, cfg.augment_fraction)
        repaired.append(ClientUpdate(u.client_id, fixed, u.n_samples))
    return repaired, dropped


def gancrop_defense_step(
    updates: list,
    global_params: ParameterVector,
    state: ExperimentState,
    round_idx: int = 0,
    trace: Optional[dict] = None,
) -> ParameterVector:
    """Detect suspects, repair them with recovered triggers, merge with the benign updates.

    ``trace`` (if given) receives verdicts, the benign/repaired update lists,
    dropped client ids and per-phase timings.
    """
    if state.detector is None:
        raise RuntimeError("gancrop needs a trained detector")
    t0 = time.perf_counter()
    verdicts = classify_updates(state.detector, updates, state.cfg.detector.threshold, reference=global_params)
    t1 = time.perf_counter()
    flagged = {v.client_id for v in verdicts if v.suspect}
    benign = [u for u in updates if u.client_id not in flagged]
    suspects = [u for u in updates if u.client_id in flagged]
    repaired, dropped = _repair_all(suspects, global_params, state, round_idx)
    t2 = time.perf_counter()
    merged = gancrop_merge(benign, repaired)
    t3 = time.perf_counter()
    if trace is not None:
        trace.update(
            verdicts=verdicts,
            benign=benign,
            repaired=repaired,
            dropped=dropped,
            t_detect=t1 - t0,
            t_recover=t2 - t1,
            t_aggregate=t3 - t2,
        )
    return merged


def gansweep_step(
    updates: list, global_params: ParameterVector, state: ExperimentState, round_idx: int = 0
) -> ParameterVector:
    """Ablation: recovery and repair on every update, no detection."""
    repaired, _ = _repair_all(updates, global_params, state, round_idx)
    if not repaired:
        raise ValueError("no models to merge")
    return fedavg(repaired)


def _submodel_metrics(benign: list, repaired: list, dropped: list, state: ExperimentState) -> dict:
    out = {"n_benign": len(benign), "n_repaired": len(repaired), "n_dropped": len(dropped)}
    for name, group in (("benign", benign), ("repaired", repaired)):
        if group:
            sub = fedavg(group)
            out[f"{name}_main_acc"] = evaluate(sub, state.eval_set)
            out[f"{name}_backdoor_acc"] = backdoor_accuracy(sub, state.eval_set, state.poison)
        else:
            out[f"{name}_main_acc"] = None
            out[f"{name}_backdoor_acc"] = None
    return out


def run_round(global_params: ParameterVector, cfg: ExperimentConfig, round_idx: int, state: ExperimentState) -> tuple:
    try:
        return _run_round(global_params, cfg, round_idx, state)
    except RoundError:
        raise
    except Exception as exc:
        raise RoundError(round_idx, exc) from exc


def _run_round(global_params, cfg, round_idx, state):
    timings = {k: 0.0 for k in TIMING_COLUMNS}
    t0 = time.perf_counter()
    updates = _local_updates(global_params, state, round_idx)
    timings["t_train"] = time.perf_counter() - t0
    verdicts: list = []
    submodels = None
    fedavg_bd = None
    t0 = time.perf_counter()
    if cfg.aggregator == "fedavg":
        new = fedavg(updates)
    elif cfg.aggregator == "krum":
        new = krum(updates, cfg.krum_f if cfg.krum_f is not None else default_krum_f(len(updates), cfg.attacker_fraction))
    elif cfg.aggregator == "trimmed_mean":
        new = trimmed_mean(updates, cfg.trim_k if cfg.trim_k is not None else default_trim_k(len(updates), cfg.attacker_fraction))
    elif cfg.aggregator == "fang":
        n_reject = cfg.fang_reject if cfg.fang_reject is not None else default_krum_f(len(updates), cfg.attacker_fraction)
        new = fang_lfr(updates, global_params, state.public_set, min(n_reject, len(updates) - 1))
    elif cfg.aggregator == "gansweep":
        new = gansweep_step(updates, global_params, state, round_idx)
        timings["t_recover"] = time.perf_counter() - t0
        t0 = time.perf_counter()
    else:
        trace: dict = {}
        new = gancrop_defense_step(updates, global_params, state, round_idx, trace)
        verdicts = trace["verdicts"]
        for k in ("t_detect", "t_recover", "t_aggregate"):
            timings[k] = trace[k]
        submodels = _submodel_metrics(trace["benign"], trace["repaired"], trace["dropped"], state)
        fedavg_bd = backdoor_accuracy(fedavg(updates), state.eval_set, state.poison)
    if cfg.aggregator != "gancrop":
        timings["t_aggregate"] = time.perf_counter() - t0
    if not new.compatible(global_params):
        raise ValueError("aggregated model changed the parameter layout")

    main_acc = evaluate(new, state.eval_set)
    bd_acc = backdoor_accuracy(new, state.eval_set, state.poison)
    tp = sum(1 for v in verdicts if v.suspect and v.client_id in state.attackers)
    fp = sum(1 for v in verdicts if v.suspect and v.client_id not in state.attackers)
    report = RoundReport(
        round=round_idx,
        main_acc=main_acc,
        backdoor_acc=bd_acc,
        verdicts=verdicts,
        wall_time=timings,
        global_params_digest=params_digest(new),
        true_positives=tp,
        false_positives=fp,
        submodels=submodels,
        fedavg_backdoor_acc=fedavg_bd,
    )
    return new, report


# --- experiment --------------------------------------------------------------


class _Writers:
    def __init__(self, out_dir: Optional[Path], with_submodels: bool):
        self.out_dir = out_dir
        self.with_submodels = with_submodels
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "rounds.csv", "w", newline="") as fh:
            csv.DictWriter(fh, ROUND_COLUMNS).writeheader()
        (out_dir / "rounds.jsonl").write_text("")
        if with_submodels:
            with open(out_dir / "submodels.csv", "w", newline="") as fh:
                csv.DictWriter(fh, SUBMODEL_COLUMNS).writeheader()

    def append(self, report: RoundReport) -> None:
        if self.out_dir is None:
            return
        with open(self.out_dir / "rounds.csv", "a", newline="") as fh:
            csv.DictWriter(fh, ROUND_COLUMNS).writerow(report.row())
        with open(self.out_dir / "rounds.jsonl", "a") as fh:
            fh.write(json.dumps(report.to_json(), sort_keys=True) + "\n")
        if self.with_submodels and report.submodels is not None:
            row = {"round": report.round}
            for k in SUBMODEL_COLUMNS[1:]:
                v = report.submodels.get(k)
                row[k] = "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
            with open(self.out_dir / "submodels.csv", "a", newline="") as fh:
                csv.DictWriter(fh, SUBMODEL_COLUMNS).writerow(row)


def run_experiment(cfg: ExperimentConfig, out_dir=None, state: Optional[ExperimentState] = None) -> list:
    """Setup plus ``cfg.rounds`` rounds. Reports are flushed to ``out_dir`` after every round."""
    out = Path(out_dir) if out_dir is not None else None
    writers = _Writers(out, cfg.aggregator == "gancrop")
    if out is not None:
        (out / "config.json").write_text(cfg.to_json())
    state = state if state is not None else setup(cfg)
    global_params = state.initial
    reports = []
    for r in range(cfg.rounds):
        global_params, report = run_round(global_params, cfg, r, state)
        reports.append(report)
        writers.append(report)
        log.info(
            "%s round %d main=%.3f backdoor=%.3f suspects=%d",
            cfg.aggregator, r, report.main_acc, report.backdoor_acc, report.n_suspects,
        )
        if out is not None and cfg.checkpoint_every and (r + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"round_{r:03d}.fcrop", global_params, {"round": r})
    if out is not None:
        save_checkpoint(out / "final.fcrop", global_params, {"round": cfg.rounds - 1, "aggregator": cfg.aggregator})
    return reports


def rounds_digest(path) -> str:
    """SHA-256 of ``rounds.csv`` with the wall-clock columns left out."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    h = hashlib.sha256()
    for row in rows:
        h.update(json.dumps({k: v for k, v in row.items() if k not in TIMING_COLUMNS}, sort_keys=True).encode())
    return h.hexdigest()
