import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octa.cluster import (
    DB_INF,
    ClusterModel,
    centroid_correspondence,
    db_index,
    fit_spherical_kmeans,
    select_C,
    shift_nonnegative,
)
from octa.config import ClusterSection
from octa.errors import ShapeError


def planted(seed, k=5, n=300, d=16, noise=0.05):
    rng = np.random.default_rng(seed)
    centers = np.abs(rng.normal(size=(k, d)))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    truth = rng.integers(0, k, n)
    z = centers[truth] * rng.uniform(0.5, 2.0, (n, 1)) + rng.normal(0, noise, (n, d))
    return z, truth


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_shift_nonnegative(rng):
    z = rng.normal(size=(50, 4))
    zp, shift = shift_nonnegative(z)
    np.testing.assert_allclose(zp.min(axis=0), 0)
    np.testing.assert_allclose(shift, z.min(axis=0))
    pos = np.abs(z) + 1
    assert np.allclose(shift_nonnegative(pos)[0].min(axis=0), 0)
    assert np.all(shift_nonnegative(z[:1])[0] == 0)
    u = unit(zp[np.linalg.norm(zp, axis=1) > 0])
    cos = u @ u.T
    assert cos.min() >= -1e-12 and (1 - cos).max() <= 1 + 1e-12


def test_two_direction_groups_separate(rng):
    a = np.array([1.0, 0.05]) + rng.normal(0, 0.01, (20, 2))
    b = np.array([0.05, 1.0]) + rng.normal(0, 0.01, (20, 2))
    z = np.abs(np.vstack([a, b]))
    m = fit_spherical_kmeans(z, 2, seed=0)
    assert len(set(m.labels[:20])) == 1 and len(set(m.labels[20:])) == 1
    assert m.labels[0] != m.labels[20]
    assert m.objective < 0.01
    # exhaustive oracle over all 2-partitions of a small subset
    small = z[[0, 1, 2, 20, 21, 22]]
    u = unit(small)
    # a group's objective with its normalized-mean centroid is |G| - ||sum of members||
    best = min(
        sum(lab.count(g) - np.linalg.norm(u[[i for i in range(6) if lab[i] == g]].sum(0))
            for g in (0, 1) if g in lab)
        for lab in itertools.product((0, 1), repeat=6) if len(set(lab)) == 2
    )
    ms = fit_spherical_kmeans(small, 2, seed=0)
    assert ms.objective == pytest.approx(best, abs=1e-6)


def test_one_point_per_cluster_zero_objective(rng):
    z = np.abs(rng.normal(size=(6, 5)))
    m = fit_spherical_kmeans(z, 6, seed=1)
    assert m.objective == pytest.approx(0, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_objective_monotone_within_restarts(seed):
    z, _ = planted(seed, noise=0.2)
    m = fit_spherical_kmeans(shift_nonnegative(z)[0], 6, seed=seed)
    assert len(m.traces) == 10
    for tr in m.traces:
        assert all(b <= a + 1e-9 for a, b in zip(tr, tr[1:]))


def test_centroids_unit_norm_and_assign_reproduces_training(rng):
    z, _ = planted(4)
    zp, shift = shift_nonnegative(z)
    m = fit_spherical_kmeans(zp, 5, seed=0, shift=shift)
    np.testing.assert_allclose(np.linalg.norm(m.centroids, axis=1), 1, atol=1e-9)
    np.testing.assert_array_equal(m.assign(z.astype(np.float32).astype(np.float64)), m.labels)


def test_assign_exact_ties_and_brute_force(rng):
    c = unit(np.abs(rng.normal(size=(4, 6))))
    m = ClusterModel(c, np.zeros(6))
    assert m.assign(c[3]) == 3
    m2 = ClusterModel(unit(np.array([[1.0, 0.0], [0.0, 1.0]])), np.zeros(2))
    assert m2.assign(np.array([1.0, 1.0])) == 0
    x = np.abs(rng.normal(size=(200, 6)))
    brute = [min(range(4), key=lambda j: (1 - unit(v) @ c[j], j)) for v in x]
    np.testing.assert_array_equal(m.assign(x), brute)
    with pytest.warns(UserWarning):
        assert m.assign(np.zeros((1, 6)))[0] == 0
    with pytest.raises(ShapeError):
        m.assign(np.zeros(5))


def test_db_index_cases(rng):
    a = unit(np.array([1.0, 0.02, 0.0])) + rng.normal(0, 0.005, (30, 3))
    b = unit(np.array([0.0, 0.02, 1.0])) + rng.normal(0, 0.005, (30, 3))
    z = np.abs(np.vstack([a, b]))
    m = fit_spherical_kmeans(z, 2, seed=0)
    db = db_index(m, z, m.labels)
    assert db < 0.2
    assert db_index(m, np.vstack([z, z]), np.concatenate([m.labels, m.labels])) == pytest.approx(db)
    perm = ClusterModel(m.centroids[::-1].copy(), m.shift)
    assert db_index(perm, z, 1 - m.labels) == pytest.approx(db)
    same = ClusterModel(np.vstack([m.centroids[0], m.centroids[0]]), m.shift)
    assert db_index(same, z, np.r_[np.zeros(30, int), np.ones(30, int)]) == DB_INF


def test_db_index_formula_oracle(rng):
    z = np.abs(rng.normal(size=(40, 5)))
    m = fit_spherical_kmeans(z, 3, seed=2)
    u = unit(z)
    S = [np.mean([1 - u[i] @ m.centroids[j] for i in np.nonzero(m.labels == j)[0]]) for j in range(3)]
    M = 1 - m.centroids @ m.centroids.T
    expect = np.mean([max((S[i] + S[j]) / M[i, j] for j in range(3) if j != i) for i in range(3)])
    assert db_index(m, z, m.labels) == pytest.approx(expect, rel=1e-9)


def test_select_C_recovers_planted_clusters():
    hits = 0
    for seed in range(10):
        z, _ = planted(seed)
        model, curve = select_C(shift_nonnegative(z)[0], range(2, 11), seed=seed)
        hits += model.C == 5
        assert [c for c, _ in curve] == list(range(2, 11))
    assert hits >= 8


def test_select_C_single_value(rng):
    z, _ = planted(1)
    model, curve = select_C(shift_nonnegative(z)[0], [4])
    assert model.C == 4 and len(curve) == 1


def test_default_range_covers_published_choices():
    # reported selections were C=10 (late) and C=9 (early); kept as documentation
    lo, hi = ClusterSection().C_range
    assert lo == 2 and hi == 30
    assert lo <= 9 <= hi and lo <= 10 <= hi


def test_centroid_correspondence(rng):
    c = unit(np.abs(rng.normal(size=(3, 4))))
    m = ClusterModel(c, np.zeros(4))
    d = centroid_correspondence(m, m)
    np.testing.assert_allclose(np.diag(d), 0, atol=1e-12)
    e = ClusterModel(np.eye(4)[:2], np.zeros(4))
    o = ClusterModel(np.eye(4)[2:], np.zeros(4))
    np.testing.assert_allclose(centroid_correspondence(e, o), 1)
    other = ClusterModel(unit(np.abs(rng.normal(size=(5, 4)))), np.zeros(4))
    brute = [[1 - sum(a * b for a, b in zip(ci, cj)) for cj in other.centroids] for ci in c]
    np.testing.assert_allclose(centroid_correspondence(m, other), brute, atol=1e-12)
    assert np.all((0 <= centroid_correspondence(m, other)) & (centroid_correspondence(m, other) <= 1))
    with pytest.raises(ShapeError):
        centroid_correspondence(m, ClusterModel(np.eye(3), np.zeros(3)))


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_fit_properties(seed, C):
    rng = np.random.default_rng(seed)
    z = np.abs(rng.normal(size=(int(rng.integers(C + 1, 40)), 4)))
    m = fit_spherical_kmeans(z, C, seed=seed, n_restarts=2)
    np.testing.assert_allclose(np.linalg.norm(m.centroids, axis=1), 1, atol=1e-9)
    u = unit(z)
    assert m.objective == pytest.approx(np.sum(1 - np.max(u @ m.centroids.T, axis=1)), abs=1e-9)
