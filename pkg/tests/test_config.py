import pytest

from fedpoint.config import ConfigError, RunConfig, load_config
from fedpoint.model import ModelConfig


def _write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return p


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.federated_sites() == ["A", "B", "C", "D"] and cfg.unseen == ("E", "F")


def test_full_file(tmp_path):
    cfg = load_config(_write(tmp_path, """
[model]
n_points = 512
d_in = 8
stage_dims = 8 16 32 64 128
sampling = fps
position = all_one

[train]
epochs = 12
pace = 3
dda = no
mode = ddafcs
train_fraction = 0.75

[run]
seed = 4
data_dir = data

[site Q]
n_slides = 20
gamma = 3.0
cluster_radius = 0.05
"""))
    assert cfg.model.n_points == 512 and cfg.model.sampling_mode == "fps"
    assert cfg.model.position_mode == "all_one"
    assert (cfg.train.K, cfg.train.E, cfg.train.dda, cfg.train.seed) == (12, 3, False, 4)
    assert cfg.mode == "ddafcs" and cfg.train_fraction == 0.75
    assert cfg.data_dir == tmp_path / "data"
    assert [s.site_id for s in cfg.sites] == ["Q"] and cfg.sites[0].d == 8


def test_default_sites_follow_d_in(tmp_path):
    cfg = load_config(_write(tmp_path, "[model]\nd_in = 8\n"))
    assert all(s.d == 8 for s in cfg.sites)


@pytest.mark.parametrize("text", [
    "[model]\nn_points = 300\n",
    "[model]\nwidth = 3\n",
    "[extra]\n",
    "[train]\ntrain_fraction = 0.6\n",
    "[train]\nmode = fast\n",
    "[train]\nepochs = many\n",
    "[model]\nsampling = random\n",
    "[site A]\ngamma = 2\n",
    "[site A]\nn_slides = 10\ngamma = 2\nunseen = yes\n",
    "not an ini file",
])
def test_rejections(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_missing_data_dir(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig(data_dir=tmp_path / "absent").validate(need_data=True)


def test_dim_mismatch():
    with pytest.raises(ConfigError):
        RunConfig(model=ModelConfig(d_in=8)).validate()


def test_with_seed_updates_training_seed():
    cfg = RunConfig().with_seed(9)
    assert cfg.seed == 9 and cfg.train.seed == 9
