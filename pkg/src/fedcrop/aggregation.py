"""Server-side aggregation rules over flat client parameter vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ImageSet
from .models import ParameterVector, mean_loss

AGGREGATORS = ("fedavg", "krum", "trimmed_mean", "fang", "gancrop", "gansweep")


@dataclass
class ClientUpdate:
    client_id: int
    params: ParameterVector
    n_samples: int
    wall_time: float = 0.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"client {self.client_id}: n_samples must be >= 1")
        if not self.params.is_finite():
            raise ValueError(f"client {self.client_id}: non-finite parameters")


def _stack(updates: Sequence[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no updates to aggregate")
    ref = updates[0].params
    for u in updates[1:]:
        if not u.params.compatible(ref):
            raise ValueError(f"client {u.client_id} has a different parameter layout")
    return np.stack([np.asarray(u.params.values, dtype=np.float64) for u in updates])


def fedavg(updates: Sequence[ClientUpdate]) -> ParameterVector:
    """Sample-count weighted mean."""
    mat = _stack(updates)
    w = np.array([u.n_samples for u in updates], dtype=np.float64)
    return updates[0].params.with_values((w / w.sum()) @ mat)


def krum_scores(mat: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each row to its n-f-2 nearest other rows."""
    n = len(mat)
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        d2 = np.delete(((mat - mat[i]) ** 2).sum(axis=1), i)
        scores[i] = np.sort(d2)[:m].sum()
    return scores


def krum(updates: Sequence[ClientUpdate], f: int) -> ParameterVector:
    """Select the update with the lowest Krum score; ties go to the lowest client_id."""
    n = len(updates)
    if f < 0 or n < f + 3:
        raise ValueError(f"krum needs n >= f + 3 (n={n}, f={f})")
    scores = krum_scores(_stack(updates), f)
    best = min(range(n), key=lambda i: (scores[i], updates[i].client_id))
    return updates[best].params.with_values(np.array(updates[best].params.values, copy=True))


def trimmed_mean(updates: Sequence[ClientUpdate], k: int) -> ParameterVector:
    """Coordinate-wise mean after dropping the k largest and k smallest values."""
    n = len(updates)
    if k < 0 or n <= 2 * k:
        raise ValueError(f"trimmed_mean needs n > 2k (n={n}, k={k})")
    mat = np.sort(_stack(updates), axis=0)
    return updates[0].params.with_values(mat[k : n - k].mean(axis=0))


def fang_lfr(
    updates: Sequence[ClientUpdate],
    global_params: ParameterVector,
    val_set: ImageSet,
    n_reject: int,
) -> ParameterVector:
    """Loss-based rejection: drop the updates whose removal lowers validation loss most."""
    n = len(updates)
    if not 0 <= n_reject < n:
        raise ValueError(f"n_reject must be in [0, {n}), got {n_reject}")
    if len(val_set) == 0:
        raise ValueError("fang_lfr needs a non-empty validation set")
    if n_reject == 0:
        return fedavg(updates)
    if not all(u.params.compatible(global_params) for u in updates):
        raise ValueError("update layout differs from the global model")
    with_all = mean_loss(fedavg(updates), val_set)
    impact = []
    for i in range(n):
        rest = [u for j, u in enumerate(updates) if j != i]
        # positive impact: excluding update i lowers the loss
        impact.append(with_all - mean_loss(fedavg(rest), val_set))
    order = sorted(range(n), key=lambda i: (-impact[i], updates[i].client_id))
    rejected = set(order[:n_reject])
    return fedavg([u for i, u in enumerate(updates) if i not in rejected])


def gancrop_merge(benign: Sequence[ClientUpdate], repaired: Sequence[ClientUpdate]) -> ParameterVector:
    merged = list(benign) + list(repaired)
    if not merged:
        raise ValueError("no models to merge")
    return fedavg(merged)


def default_krum_f(n: int, attacker_fraction: float = 0.3) -> int:
    return min(math.ceil(attacker_fraction * n), max(n - 3, 0))


def default_trim_k(n: int, attacker_fraction: float = 0.3) -> int:
    return min(math.floor(attacker_fraction * n), (n - 1) // 2)
