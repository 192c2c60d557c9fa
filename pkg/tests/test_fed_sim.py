import math

import numpy as np
import pytest

from fedpoint.fed_sim import (FedConfig, SiteData, aggregate, learning_rate, run, sync_epochs, train_centralized)
from fedpoint.model import ModelConfig, ModelWeights, init_weights
from fedpoint.point_ops import PointSet

TINY = ModelConfig(n_points=64, d_in=4, stage_dims=(4, 8, 16, 32), k_neighbors=8)


def _slides(n, seed, n_points=80):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        coords = np.column_stack([rng.random((n_points, 2)), np.ones(n_points)])
        feats = rng.standard_normal((n_points, 4)) + (i % 2)
        out.append(PointSet(coords, feats, i % 2))
    return out


def _w(value, aux=0.0):
    return ModelWeights({"t": np.array([float(value)]), "aux.cls.weight": np.array([float(aux)])})


def test_aggregate_equal_sizes():
    assert aggregate([_w(0), _w(2)], [5, 5]).get("t")[0] == 1.0


def test_aggregate_weighted():
    assert aggregate([_w(0), _w(4)], [1, 3]).get("t")[0] == 3.0


def test_aggregate_identity():
    w = init_weights(TINY, np.random.default_rng(0))
    out = aggregate([w.copy(), w.copy(), w.copy()], [3, 5, 7])
    assert all(np.abs(out.get(k) - v).max() <= 1e-15 for k, v in w.items())


def test_aggregate_leaves_aux_alone():
    out = aggregate([_w(0, aux=1), _w(2, aux=7)], [1, 1])
    assert out.get("aux.cls.weight")[0] == 1.0


def test_aggregate_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate([_w(0), ModelWeights({"t": np.zeros(2), "aux.cls.weight": np.zeros(1)})], [1, 1])


@pytest.mark.parametrize("E", [1, 2, 4, 8, 16, 32])
def test_sync_count(E):
    assert len(sync_epochs(64, E)) == 64 // E


def test_long_pace_syncs_once():
    assert sync_epochs(10, 50) == [9]


def test_learning_rate_schedule():
    cfg = FedConfig(K=20, lr=1.0, warmup_epochs=4)
    assert learning_rate(0, cfg) == 0.25 and learning_rate(3, cfg) == 1.0
    assert learning_rate(4, cfg) == 1.0
    assert learning_rate(19, cfg) < 0.02


def test_empty_site_rejected():
    with pytest.raises(ValueError):
        SiteData("A", [])


def test_single_site_matches_centralized():
    cfg = FedConfig(K=3, E=1, lr=3e-3, batch_size=4, warmup_epochs=1, validate=False)
    data = SiteData("A", _slides(6, 0))
    res = run(cfg, TINY, [data])
    central, _ = train_centralized(cfg, TINY, data)
    assert res.n_syncs == 3
    assert all(res.final[0].get(k).tobytes() == v.tobytes() for k, v in central.items())


def test_zero_learning_rate_keeps_weights():
    cfg = FedConfig(K=2, lr=0.0, batch_size=4, validate=False)
    init = init_weights(TINY, np.random.default_rng(1))
    w, _ = train_centralized(cfg, TINY, SiteData("A", _slides(4, 1)), init=init)
    assert all(w.params[k].tobytes() == v.tobytes() for k, v in init.params.items())


def test_overfits_one_slide():
    cfg = FedConfig(K=20, lr=1e-2, batch_size=1, warmup_epochs=0, dda=False, weight_decay=0.0)
    _, hist = train_centralized(cfg, TINY, SiteData("A", _slides(2, 2)[1:]))
    losses = [h["loss_cls"] for h in hist]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_dda_off_reports_full_mask():
    cfg = FedConfig(K=2, dda=False, batch_size=4, validate=False)
    _, hist = train_centralized(cfg, TINY, SiteData("A", _slides(6, 3)))
    assert all(h["mask_rate"] == 1.0 for h in hist)


def test_sync_leaves_sites_aligned_except_aux():
    cfg = FedConfig(K=2, E=2, batch_size=4, validate=False)
    res = run(cfg, TINY, [SiteData("A", _slides(4, 4)), SiteData("B", _slides(6, 5))])
    a, b = (s.weights for s in res.sites)
    assert res.n_syncs == 1
    for name in a.synced_names():
        assert a.get(name).tobytes() == b.get(name).tobytes()
    assert any(a.get(n).tobytes() != b.get(n).tobytes() for n in a.aux_names())


def test_isolated_run_never_syncs():
    cfg = FedConfig(K=2, federated=False, batch_size=4)
    sites = [SiteData("A", _slides(4, 6), _slides(2, 7)), SiteData("B", _slides(4, 8), _slides(2, 9))]
    res = run(cfg, TINY, sites)
    assert res.n_syncs == 0 and len(res.best) == 2
    assert not any(h["site"] == "server" for h in res.history)
    assert all(not math.isnan(a) for a in res.best_val_auc)


def test_bad_config():
    with pytest.raises(ValueError):
        FedConfig(E=0)
    with pytest.raises(ValueError):
        FedConfig(lr=-1.0)
