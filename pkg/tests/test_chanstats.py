import itertools

import numpy as np
import pytest

from chanstats import (CorrCache, cd_ratio, compute_stats, cosine_sim, distance_to_similarity, dtw,
                       dtw_sim, euclid_sim, pearson_corr, split_hash, train_split_stats)
from errors import ContractError


def naive_pearson(data):
    T, C = data.shape
    R = np.zeros((C, C))
    for i in range(C):
        for j in range(C):
            xi, xj = data[:, i], data[:, j]
            cov = sum((xi[t] - xi.mean()) * (xj[t] - xj.mean()) for t in range(T)) / T
            R[i, j] = cov / (xi.std() * xj.std())
    return R


def test_pearson_identical_and_anti_correlated_channels(rng):
    x = rng.normal(size=30)
    np.testing.assert_allclose(pearson_corr(np.column_stack([x, x])).R, np.ones((2, 2)), atol=1e-12)

    stats = pearson_corr(np.column_stack([x, -x]))
    assert stats.R[0, 1] == pytest.approx(-1.0, abs=1e-12)
    assert stats.R_abs[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_pearson_matches_double_loop_oracle(rng):
    data = rng.normal(size=(50, 6))
    np.testing.assert_allclose(pearson_corr(data).R, naive_pearson(data), rtol=0, atol=1e-12)


def test_pearson_constant_channel_is_zero_with_warning(rng):
    data = np.column_stack([rng.normal(size=20), np.full(20, 3.0), rng.normal(size=20)])
    stats = pearson_corr(data)
    assert stats.R[1, 0] == 0.0 and stats.R[1, 2] == 0.0
    assert stats.R[1, 1] == 1.0
    assert np.isfinite(stats.R_bar).all()
    assert any("constant" in w for w in stats.warnings)


def test_pearson_needs_two_rows():
    with pytest.raises(ContractError):
        pearson_corr(np.ones((1, 3)))


def test_pearson_is_invariant_to_affine_rescaling(rng):
    data = rng.normal(size=(80, 5))
    scaled = data * np.array([2.0, -0.5, 10.0, 1e-3, -7.0]) + np.array([1.0, -4.0, 0.0, 100.0, 3.0])
    np.testing.assert_allclose(pearson_corr(scaled).R_abs, pearson_corr(data).R_abs, rtol=0, atol=1e-12)


def test_stats_invariants(rng):
    for metric in ("pearson", "cosine", "euclid", "dtw"):
        stats = compute_stats(rng.normal(size=(40, 5)), metric)
        np.testing.assert_allclose(stats.R, stats.R.T, rtol=0, atol=1e-12)
        assert (stats.R_abs >= 0).all() and (stats.R_abs <= 1).all()
        np.testing.assert_array_equal(np.diag(stats.R_abs), 1.0)
        assert abs(stats.R_bar.sum()) < 1e-12
        assert abs(stats.R_bar.mean()) < 1e-12


def test_identical_channels_have_full_similarity(rng):
    x = rng.normal(size=25)
    data = np.column_stack([x, x, rng.normal(size=25)])
    assert cosine_sim(data).R_abs[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert euclid_sim(data).R[0, 1] == 0.0
    assert euclid_sim(data).R_abs[0, 1] == 1.0
    assert dtw_sim(data).R_abs[0, 1] == 1.0


def test_distance_min_max_by_hand():
    D = np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 2.0], [3.0, 2.0, 0.0]])
    S, warning = distance_to_similarity(D)
    assert warning is None
    assert S[0, 1] == 1.0 and S[0, 2] == 0.0 and S[1, 2] == 0.5
    np.testing.assert_array_equal(np.diag(S), 1.0)


def test_equal_distances_fall_back_to_half():
    S, warning = distance_to_similarity(np.ones((3, 3)) - np.eye(3))
    assert warning is not None
    assert S[0, 1] == 0.5 and S[1, 2] == 0.5 and S[2, 2] == 1.0


def test_distance_metrics_need_two_channels(rng):
    with pytest.raises(ContractError):
        euclid_sim(rng.normal(size=(10, 1)))
    with pytest.raises(ContractError):
        dtw_sim(rng.normal(size=(10, 1)))


def test_dtw_hand_cases():
    x = np.array([0.3, -1.0, 2.0, 0.5])
    assert dtw(x, x) == 0.0
    assert dtw([0.0], [5.0]) == 25.0
    assert dtw([1, 2, 3], [1, 2, 2, 3]) == 0.0
    with pytest.raises(ContractError):
        dtw([], [1.0])


def brute_force_dtw(x, y):
    """Cheapest monotone warping path by exhaustive search"""
    n, m = len(x), len(y)
    best = np.inf

    def walk(i, j, cost):
        nonlocal best
        cost += (x[i] - y[j]) ** 2
        if (i, j) == (n - 1, m - 1):
            best = min(best, cost)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, cost)

    walk(0, 0, 0.0)
    return best


def test_dtw_matches_path_enumeration(rng):
    for n, m in itertools.product((2, 3, 4), (3, 4)):
        x, y = rng.normal(size=n), rng.normal(size=m)
        assert dtw(x, y) == pytest.approx(brute_force_dtw(x, y), rel=1e-12)


def test_dtw_symmetry_and_diagonal_bound(rng):
    for _ in range(20):
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert dtw(x, y) == pytest.approx(dtw(y, x), rel=1e-12)
        assert dtw(x, y) <= np.sum((x - y) ** 2) + 1e-12


def test_cd_ratio_contract():
    assert cd_ratio(np.eye(5)) == 0.0
    assert cd_ratio(np.ones((5, 5))) == 1.0
    assert cd_ratio([[1, 0.4], [0.6, 1]]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ContractError):
        cd_ratio(np.ones((1, 1)))
    with pytest.raises(ContractError):
        cd_ratio(np.ones((2, 3)))


def test_cd_ratio_is_monotone(rng):
    M1 = rng.uniform(size=(6, 6))
    M2 = M1 + rng.uniform(size=(6, 6))
    assert cd_ratio(M1) <= cd_ratio(M2)


def test_split_hash_tracks_content(rng):
    data = rng.normal(size=(10, 3))
    assert split_hash(data) == split_hash(data.copy())
    changed = data.copy()
    changed[4, 1] += 1e-9
    assert split_hash(changed) != split_hash(data)


def test_cache_round_trip_is_bit_exact(tmp_path, rng):
    data = rng.normal(size=(60, 4))
    path = str(tmp_path / "cache.yaml")
    fresh = train_split_stats(data, "pearson", "demo", CorrCache(path))

    reloaded = CorrCache(path).get("demo", "pearson", split_hash(data))
    assert reloaded is not None
    np.testing.assert_array_equal(reloaded.R, fresh.R)
    np.testing.assert_array_equal(reloaded.R_bar, fresh.R_bar)
    assert reloaded.source_rows == 60


def test_cache_misses_when_training_split_changes(tmp_path, rng):
    data = rng.normal(size=(60, 4))
    cache = CorrCache(str(tmp_path / "cache.yaml"))
    train_split_stats(data, "pearson", "demo", cache)
    assert cache.get("demo", "pearson", split_hash(data[:50])) is None
    assert cache.get("demo", "cosine", split_hash(data)) is None
