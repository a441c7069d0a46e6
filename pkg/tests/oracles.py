"""Brute-force reference implementations written independently of the package."""

import itertools

import numpy as np


def krum_bruteforce(points, f, ids):
    """Enumerate every neighbour subset of size n-f-2 and take the cheapest."""
    n = len(points)
    m = n - f - 2
    best, best_key = None, None
    for i in range(n):
        others = [j for j in range(n) if j != i]
        cost = min(
            sum(float(np.sum((points[i] - points[j]) ** 2)) for j in subset)
            for subset in itertools.combinations(others, m)
        ) if m > 0 else 0.0
        key = (cost, ids[i])
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def trimmed_mean_bruteforce(points, k):
    n, d = points.shape
    out = np.empty(d)
    for c in range(d):
        column = sorted(points[:, c].tolist())
        kept = column[k : n - k]
        out[c] = sum(kept) / len(kept)
    return out


def weighted_mean(points, weights):
    total = float(sum(weights))
    return sum(w * p for w, p in zip(weights, points)) / total
