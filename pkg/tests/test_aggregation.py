import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcrop.aggregation import (
    ClientUpdate,
    default_krum_f,
    default_trim_k,
    fang_lfr,
    fedavg,
    gancrop_merge,
    krum,
    krum_scores,
    trimmed_mean,
)
from fedcrop.data import ImageSet
from fedcrop.models import ModelSpec, ParameterVector, init_params, local_train, TrainConfig

from conftest import flat
from oracles import krum_bruteforce, trimmed_mean_bruteforce, weighted_mean


def updates_from(points, weights=None, ids=None):
    weights = weights if weights is not None else [1] * len(points)
    ids = ids if ids is not None else list(range(len(points)))
    return [ClientUpdate(i, flat(p), w) for i, p, w in zip(ids, points, weights)]


def test_fedavg_closed_form():
    pts = np.array([[1.0, 2.0], [3.0, 6.0]])
    out = fedavg(updates_from(pts, [1, 3]))
    np.testing.assert_allclose(out.values, [2.5, 5.0])


def test_fedavg_single_and_identical():
    pts = np.array([[0.5, -1.0, 2.0]] * 3)
    np.testing.assert_array_equal(fedavg(updates_from(pts, [1, 5, 9])).values, pts[0])


def test_fedavg_layout_mismatch():
    a = ClientUpdate(0, flat([1.0, 2.0], "a"), 1)
    b = ClientUpdate(1, flat([1.0, 2.0], "b"), 1)
    with pytest.raises(ValueError):
        fedavg([a, b])


def test_empty_aggregation():
    with pytest.raises(ValueError):
        fedavg([])


def test_client_update_validation():
    with pytest.raises(ValueError):
        ClientUpdate(0, flat([1.0]), 0)
    with pytest.raises(ValueError):
        ClientUpdate(0, flat([np.nan]), 1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 6), d=st.integers(1, 8))
def test_krum_matches_bruteforce(seed, n, d):
    rng = np.random.default_rng(seed)
    pts = rng.integers(-3, 4, size=(n, d)).astype(np.float64)
    for f in range(0, n - 2):
        got = krum(updates_from(pts), f)
        want = krum_bruteforce(pts, f, list(range(n)))
        np.testing.assert_array_equal(got.values, pts[want])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 6), d=st.integers(1, 8))
def test_trimmed_mean_matches_bruteforce(seed, n, d):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, d))
    for k in range(0, (n + 1) // 2):
        if n <= 2 * k:
            continue
        got = trimmed_mean(updates_from(pts), k)
        np.testing.assert_allclose(got.values, trimmed_mean_bruteforce(pts, k), rtol=0, atol=1e-12)


def test_krum_tie_breaks_on_client_id():
    # every point has exactly one neighbour at distance 1: all scores tie
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    assert len(set(krum_scores(pts, 1))) == 1
    out = krum(updates_from(pts, ids=[7, 3, 9, 5]), 1)
    assert out.values[0] == 1.0


def test_krum_picks_cluster_member_not_outlier():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1], [50.0, 50.0]])
    out = krum(updates_from(pts), 1)
    assert np.linalg.norm(out.values) < 1


def test_krum_precondition():
    with pytest.raises(ValueError):
        krum(updates_from(np.zeros((3, 2))), 1)


def test_trimmed_mean_precondition():
    with pytest.raises(ValueError):
        trimmed_mean(updates_from(np.zeros((4, 2))), 2)


def test_trimmed_mean_k0_equals_plain_mean():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(trimmed_mean(updates_from(pts), 0).values, pts.mean(0))


def test_trimmed_mean_robust_to_outliers():
    pts = np.array([[1.0], [1.1], [0.9], [1e6], [-1e6]])
    assert abs(trimmed_mean(updates_from(pts), 1).values[0] - 1.0) < 0.1


def test_defaults():
    assert default_krum_f(10) == 3
    assert default_trim_k(10) == 3
    assert default_krum_f(4) == 1
    assert default_trim_k(2) == 0


def test_gancrop_merge():
    pts = np.array([[1.0], [3.0], [5.0]])
    ups = updates_from(pts, [1, 1, 2])
    np.testing.assert_allclose(gancrop_merge(ups[:2], ups[2:]).values, [3.5])
    np.testing.assert_allclose(gancrop_merge(ups, []).values, weighted_mean(pts, [1, 1, 2]))
    with pytest.raises(ValueError, match="no models to merge"):
        gancrop_merge([], [])


def test_fang_rejects_harmful_update(tiny_data, spec16):
    train, test = tiny_data
    start = init_params(spec16, 0)
    good = [local_train(start, train.subset(np.arange(i, 400, 3)), TrainConfig(epochs=2, seed=i)) for i in range(3)]
    bad = start.with_values(np.random.default_rng(0).normal(0, 3.0, size=len(start)))
    ups = [ClientUpdate(i, v, 100) for i, v in enumerate(good)] + [ClientUpdate(3, bad, 100)]
    out = fang_lfr(ups, start, test, 1)
    np.testing.assert_allclose(out.values, fedavg(ups[:3]).values)
    np.testing.assert_array_equal(fang_lfr(ups, start, test, 0).values, fedavg(ups).values)


def test_fang_preconditions(spec16):
    vec = init_params(spec16, 0)
    ups = [ClientUpdate(i, vec, 1) for i in range(2)]
    val = ImageSet(np.zeros((0, 3, 16, 16)), np.zeros(0))
    with pytest.raises(ValueError):
        fang_lfr(ups, vec, val, 1)
    with pytest.raises(ValueError):
        fang_lfr(ups, vec, val, 2)
