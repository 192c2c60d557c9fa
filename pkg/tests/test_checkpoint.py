import numpy as np
import pytest

from fedpoint.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from fedpoint.model import ModelConfig, forward, init_weights
from fedpoint.point_ops import PointSet

CFG = ModelConfig(n_points=256, d_in=4, stage_dims=(4, 8, 16, 32, 64), k_neighbors=8)


@pytest.fixture
def saved(tmp_path):
    w = init_weights(CFG, np.random.default_rng(0))
    w.buffers = {k: v + 0.25 for k, v in w.buffers.items()}
    rng = np.random.default_rng(1)
    path = tmp_path / "m.fpck"
    save_checkpoint(path, Checkpoint(w, CFG, 7, {"A": rng.bit_generator.state}, {"mode": "fcs"}))
    return path, w


def test_round_trip_bitwise(saved):
    path, w = saved
    ck = load_checkpoint(path)
    assert ck.model_config == CFG and ck.epoch == 7 and ck.meta == {"mode": "fcs"}
    assert list(ck.weights.params) == list(w.params)
    assert all(ck.weights.get(k).tobytes() == v.tobytes() for k, v in w.items())
    r = np.random.default_rng(2)
    r.bit_generator.state = ck.rng_states["A"]
    assert r.random() == np.random.default_rng(1).random()


def test_forward_identical_after_reload(saved):
    path, w = saved
    rng = np.random.default_rng(3)
    s = PointSet(np.column_stack([rng.random((256, 2)), np.ones(256)]), rng.standard_normal((256, 4)))
    a = forward(s, w, CFG)[0]
    b = forward(s, load_checkpoint(path).weights, CFG)[0]
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("where", [0, 40, -20, -1])
def test_flipped_byte_detected(saved, where):
    path, _ = saved
    raw = bytearray(path.read_bytes())
    raw[where] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated(saved):
    path, _ = saved
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
