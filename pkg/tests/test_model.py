import numpy as np
import pytest

from fedpoint.autodiff import Graph
from fedpoint.model import (ModelConfig, abstraction_block, forward, forward_graph, init_weights, param_tensors,
                            transformer_block)
from fedpoint.point_ops import PointSet


def _slide(n, d, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.random((n, 2)), np.ones(n)])
    return PointSet(coords, rng.standard_normal((n, d)), 1)


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(n_points=256, d_in=8, stage_dims=(8, 16, 32, 64, 128))
    return cfg, init_weights(cfg, np.random.default_rng(0))


def test_stage_shapes_at_256():
    cfg = ModelConfig(n_points=256, d_in=8)
    w = init_weights(cfg, np.random.default_rng(0))
    s = _slide(256, 8)
    out = forward_graph(Graph(record=False), param_tensors(w), w.buffers, cfg, s.coords[None], s.features[None],
                        training=False)
    assert out.stage_shapes == [(64, 64), (16, 128), (4, 256), (1, 512)]
    assert cfg.stage_shapes() == out.stage_shapes


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_probabilities_normalised(small, mode):
    cfg, w = small
    probs, aux, emb = forward(_slide(256, 8, 1), w, cfg, mode, rng=np.random.default_rng(0))
    assert abs(probs.sum() - 1) < 1e-12 and abs(aux.sum() - 1) < 1e-12
    assert emb.shape == (cfg.head_dim,)


@pytest.mark.parametrize("sampling", ["fps", "fcs"])
def test_eval_permutation_invariant(small, sampling):
    cfg, w = small
    cfg = ModelConfig(**{**cfg.to_dict(), "sampling_mode": sampling})
    s = _slide(256, 8, 2)
    perm = np.random.default_rng(3).permutation(256)
    a = forward(s, w, cfg, "eval")[0]
    b = forward(s.take(perm), w, cfg, "eval")[0]
    assert a.tobytes() == b.tobytes()


def test_forward_is_deterministic(small):
    cfg, w = small
    s = _slide(256, 8, 4)
    assert forward(s, w, cfg)[0].tobytes() == forward(s, w, cfg)[0].tobytes()


def test_wrong_point_count(small):
    cfg, w = small
    with pytest.raises(ValueError):
        forward(_slide(200, 8), w, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_points=100)
    with pytest.raises(ValueError):
        ModelConfig(stage_dims=(32, 64, 100, 256, 512))
    with pytest.raises(ValueError):
        ModelConfig(sampling_mode="random")
    with pytest.raises(ValueError):
        ModelConfig(position_mode="half")


def test_zero_residual_branch_is_identity():
    cfg = ModelConfig(n_points=256, d_in=8, stage_dims=(8, 16, 32, 64, 128))
    w = init_weights(cfg, np.random.default_rng(1))
    w.params["stage1.attn.w_z.weight"][:] = 0.0
    s = _slide(20, 8, 5)
    x = np.random.default_rng(6).standard_normal((20, 8))
    assert np.array_equal(transformer_block(x, s.coords, 4, w, cfg=cfg), x)


def test_zero_value_branch_is_identity():
    cfg = ModelConfig(n_points=256, d_in=8, stage_dims=(8, 16, 32, 64, 128))
    w = init_weights(cfg, np.random.default_rng(1))
    for name in ("w_v.weight", "pe.1.weight", "pe.1.bias", "q.1.weight", "q.1.bias"):
        w.params[f"stage1.attn.{name}"][:] = 0.0
    x = np.random.default_rng(6).standard_normal((20, 8))
    y, att = transformer_block(x, _slide(20, 8).coords, 4, w, cfg=cfg, return_attention=True)
    assert np.array_equal(y, x)
    assert np.allclose(att, 0.25, atol=0, rtol=0)


def test_attention_rows_sum_to_one(small):
    cfg, w = small
    x = np.random.default_rng(7).standard_normal((20, 8))
    _, att = transformer_block(x, _slide(20, 8, 8).coords, 4, w, cfg=cfg, return_attention=True)
    assert att.shape == (20, 4, 8)
    assert np.abs(att.sum(axis=1) - 1).max() < 1e-12


def test_attention_needs_k_points(small):
    cfg, w = small
    with pytest.raises(ValueError):
        transformer_block(np.zeros((3, 8)), np.zeros((3, 3)), 4, w, cfg=cfg)


def test_abstraction_four_points_pools_all(small):
    cfg, w = small
    rng = np.random.default_rng(9)
    x, p = rng.standard_normal((4, 8)), rng.random((4, 3))
    feats, centers = abstraction_block(x, p, w, mode="fps", start=0, training=False)
    assert feats.shape == (1, 16) and centers.shape == (1, 3)
    # max over all four points: reordering the input changes nothing
    feats2, _ = abstraction_block(x[::-1], p[::-1], w, mode="fps", start=3, training=False)
    assert np.array_equal(feats, feats2)


def test_abstraction_constant_features(small):
    cfg, w = small
    p = np.random.default_rng(10).random((16, 3))
    feats, _ = abstraction_block(np.ones((16, 8)), p, w, mode="fcs", training=False)
    assert np.all(feats == feats[0])


def test_abstraction_shape_law():
    cfg = ModelConfig()
    w = init_weights(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(11)
    feats, centers = abstraction_block(rng.standard_normal((64, 32)), rng.random((64, 3)), w, mode="fcs")
    assert feats.shape == (16, 64) and centers.shape == (16, 3)


def test_abstraction_needs_four_points(small):
    cfg, w = small
    with pytest.raises(ValueError):
        abstraction_block(np.zeros((3, 8)), np.zeros((3, 3)), w)


@pytest.mark.parametrize("position", ["all_zero", "all_one"])
def test_position_ablation_runs(position):
    cfg = ModelConfig(n_points=256, d_in=8, stage_dims=(8, 16, 32, 64, 128), position_mode=position)
    w = init_weights(cfg, np.random.default_rng(0))
    probs = forward(_slide(256, 8), w, cfg)[0]
    assert np.isfinite(probs).all()


def test_aux_head_excluded_from_sync(small):
    _, w = small
    assert w.aux_names() == {"aux.cls.weight", "aux.cls.bias"}
    assert not set(w.synced_names()) & w.aux_names()


def test_all_zero_positions_ignore_translation():
    cfg = ModelConfig(n_points=256, d_in=8, stage_dims=(8, 16, 32, 64, 128), position_mode="all_zero")
    w = init_weights(cfg, np.random.default_rng(0))
    s = _slide(256, 8, 12)
    moved = PointSet(s.coords + [0.3, -0.2, 0.0], s.features, s.label)
    assert forward(s, w, cfg)[0].tobytes() == forward(moved, w, cfg)[0].tobytes()
