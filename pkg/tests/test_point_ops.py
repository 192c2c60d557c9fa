import numpy as np
import pytest

import fedpoint.point_ops as po
from fedpoint.point_ops import (AugmentConfig, PointSet, augment, cosine_distance, farthest_sample, fcs, fps,
                                knn, knn_indices, subsample)
from oracles import cos_dist, knn_sort, max_min, sq_dist, tie_heavy


def _line(xs):
    xs = np.asarray(xs, dtype=float)
    return PointSet(np.column_stack([xs, np.zeros_like(xs), np.ones_like(xs)]), np.ones((len(xs), 2)))


@pytest.mark.parametrize("a, b, want", [([1, 0], [1, 0], 0.0), ([1, 0], [0, 1], 1.0), ([1, 0], [-1, 0], 2.0)])
def test_cosine_examples(a, b, want):
    assert cosine_distance(a, b) == pytest.approx(want, abs=1e-15)


def test_cosine_properties():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        assert cosine_distance(a, b) == pytest.approx(cosine_distance(b, a), abs=1e-15)
        assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-12)
        assert cosine_distance(a, b) <= 2.0


def test_cosine_zero_vector_is_finite():
    assert cosine_distance([0.0, 0.0], [1.0, 0.0]) == 1.0


def test_knn_line():
    assert set(knn(_line([0, 1, 5]), [0], 2)[0]) == {0, 1}


def test_knn_full_is_distance_order():
    assert list(knn(_line([0, 1, 5, -3]), [0], 4)[0]) == [0, 1, 3, 2]


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn(_line([0, 1]), [0], 3)


@pytest.mark.parametrize("n", [64, 200, 512])
def test_knn_matches_sort_oracle(n):
    rng = np.random.default_rng(n)
    pts = rng.random((n, 3))
    q = rng.choice(n, 12, replace=False)
    got = knn_indices(pts[q][None], pts[None], 16)[0]
    for row, i in zip(got, q):
        assert list(row) == knn_sort(pts[i], pts, 16)


def test_knn_ties_lowest_index():
    rng = np.random.default_rng(1)
    pts = tie_heavy(rng, 60, 3)
    got = knn_indices(pts[None], pts[None], 9)[0]
    for i in range(60):
        assert list(got[i]) == knn_sort(pts[i], pts, 9)


def test_fps_line():
    assert set(fps(_line([0, 1, 2, 10]), 2, start=0)) == {0, 3}


def test_fps_single():
    assert list(fps(_line([0, 1, 2]), 1, start=2)) == [2]


def test_fps_m_too_large():
    with pytest.raises(ValueError):
        fps(_line([0, 1]), 3)


def test_fps_matches_oracle():
    rng = np.random.default_rng(2)
    pts = rng.random((32, 3))
    assert list(farthest_sample(pts[None], 8, 5)[0]) == max_min(pts, 8, 5, sq_dist)


def test_fcs_basis_tie():
    feats = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    ps = PointSet(np.zeros((4, 3)), feats)
    got = fcs(ps, 2, start=0)
    assert cosine_distance(feats[got[1]], feats[0]) == 1.0
    assert list(got) == [0, 2]


def test_fcs_identical_features():
    ps = PointSet(np.zeros((6, 3)), np.ones((6, 4)))
    assert list(fcs(ps, 3, start=4)) == [4, 0, 1]


def test_fcs_default_m():
    ps = PointSet(np.random.default_rng(0).random((10, 3)), np.random.default_rng(1).random((10, 2)))
    assert len(fcs(ps)) == 3


def test_fcs_finds_orthogonal_cluster():
    rng = np.random.default_rng(4)
    u, v = np.eye(6)[0], np.eye(6)[1]
    feats = np.vstack([u + 0.05 * rng.standard_normal((10, 6)), v + 0.05 * rng.standard_normal((2, 6))])
    ps = PointSet(rng.random((12, 3)), feats)
    assert fcs(ps, 2, start=3)[1] in (10, 11)


def test_fcs_matches_oracle_with_ties():
    rng = np.random.default_rng(5)
    f = tie_heavy(rng, 40, 3)
    assert list(farthest_sample(f[None], 10, 0, "cosine")[0]) == max_min(f, 10, 0, cos_dist)


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_greedy_property_and_uniqueness(metric):
    rng = np.random.default_rng(6)
    vals = rng.standard_normal((50, 4))
    dist = sq_dist if metric == "euclidean" else cos_dist
    sel = list(farthest_sample(vals[None], 12, 7, metric)[0])
    assert sel[0] == 7 and len(set(sel)) == 12
    for t in range(1, 12):
        prev = sel[:t]
        mind = [min(dist(vals[i], vals[j]) for j in prev) for i in range(50)]
        rest = [i for i in range(50) if i not in sel[: t + 1]]
        assert all(mind[sel[t]] >= mind[i] for i in rest)


def test_bad_metric():
    with pytest.raises(ValueError):
        farthest_sample(np.zeros((1, 4, 2)), 2, 0, "manhattan")


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_kernel_and_numpy_agree(monkeypatch, metric):
    rng = np.random.default_rng(7)
    for vals in (rng.standard_normal((3, 80, 8)), np.stack([tie_heavy(rng, 80, 8) for _ in range(3)])):
        starts = np.array([0, 5, 79])
        fast = farthest_sample(vals, 20, starts, metric)
        nn = knn_indices(vals, vals, 11)
        monkeypatch.setattr(po, "USE_KERNELS", False)
        assert np.array_equal(farthest_sample(vals, 20, starts, metric), fast)
        assert np.array_equal(knn_indices(vals, vals, 11), nn)
        monkeypatch.setattr(po, "USE_KERNELS", True)


def test_subsample_permutation_when_equal():
    ps = PointSet(np.arange(15.0).reshape(5, 3), np.arange(5.0)[:, None])
    out = subsample(ps, 5, np.random.default_rng(0))
    assert sorted(out.features[:, 0]) == [0, 1, 2, 3, 4]


def test_subsample_upsamples_with_duplicates():
    ps = PointSet(np.arange(9.0).reshape(3, 3), np.arange(3.0)[:, None])
    out = subsample(ps, 6, np.random.default_rng(0))
    assert set(out.features[:, 0]) == {0, 1, 2} and out.n == 6


def test_subsample_reproducible():
    rng = np.random.default_rng(0)
    ps = PointSet(rng.random((2048, 3)), rng.random((2048, 4)))
    a = subsample(ps, 1024, np.random.default_rng(9))
    b = subsample(ps, 1024, np.random.default_rng(9))
    assert a.equals(b)


def test_subsample_empty():
    with pytest.raises(ValueError):
        subsample(PointSet(np.zeros((0, 3)), np.zeros((0, 2))), 4, np.random.default_rng(0))


def test_augment_identity():
    rng = np.random.default_rng(0)
    ps = PointSet(rng.random((20, 3)), rng.random((20, 4)))
    assert augment(ps, AugmentConfig.identity(), np.random.default_rng(1)).equals(ps)


def test_augment_fixed_scale_keeps_z():
    cfg = AugmentConfig(dropout=0.0, jitter_sigma=0.0, jitter_clip=0.0, scale=(2.0, 2.0), shift=0.0)
    out = augment(PointSet([[1.0, 1.0, 1.0]], [[0.0]]), cfg, np.random.default_rng(0))
    assert list(out.coords[0]) == [2.0, 2.0, 1.0]


def test_augment_seeded():
    rng = np.random.default_rng(0)
    ps = PointSet(rng.random((30, 3)), rng.random((30, 4)))
    cfg = AugmentConfig()
    assert augment(ps, cfg, np.random.default_rng(3)).equals(augment(ps, cfg, np.random.default_rng(3)))


@pytest.mark.parametrize("kw", [{"dropout": 1.0}, {"scale": (2.0, 1.0)}, {"shift": -1.0}, {"jitter_sigma": -1}])
def test_augment_bad_config(kw):
    with pytest.raises(ValueError):
        AugmentConfig(**kw)


def test_pointset_validation():
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        PointSet(np.zeros((3, 3)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        PointSet(np.zeros((1, 3)), np.zeros((1, 1)), label=2)
