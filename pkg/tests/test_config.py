import pytest

from sedlm import config as cfgmod
from sedlm.config import ConfigError, RunConfig


def test_defaults_are_desk_profile():
    cfg = RunConfig()
    assert (cfg.model.cnn_filters, cfg.model.gru_hidden, cfg.model.n_classes) == (16, 32, 6)
    assert cfg.corpus.frames == 128 and cfg.train.batch_size == 8 and cfg.train.patience == 50


@pytest.mark.parametrize("name", ["desk", "full", "overfit", "ab"])
def test_shipped_configs_round_trip(name):
    cfg = cfgmod.load(cfgmod.shipped(name))
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg
    assert cfg.model.n_classes == cfg.corpus.n_classes


def test_full_profile_values():
    cfg = cfgmod.load(cfgmod.shipped("full"))
    assert cfg.corpus.frames == 1024
    assert (cfg.model.cnn_filters, cfg.model.gru_hidden) == (128, 128)
    assert cfg.model.pool_plan == ((1, 5), (1, 4), (1, 2))
    assert cfg.train.clip == 0.5 and cfg.train.gamma == 1 / 12


def test_parsing_forms():
    cfg = cfgmod.loads("[model]\npool_plan = 1x2,1x20\nbinarize_conditioning = yes\n"
                       "[train]\nclip = off\nlr = 5e-4\n[schedule]\ngamma = 1/6\n"
                       "[corpus]\nratios = 0.5, 0.25, 0.25\n")
    assert cfg.model.pool_plan == ((1, 2), (1, 20))
    assert cfg.model.binarize_conditioning is True
    assert cfg.train.clip is None and cfg.train.lr == 5e-4 and cfg.train.gamma == 1 / 6
    assert cfg.corpus.ratios == (0.5, 0.25, 0.25)


@pytest.mark.parametrize("text, msg", [
    ("[nonsense]\na = 1\n", "unknown section"),
    ("[train]\nlearning_rate = 1\n", "unknown key"),
    ("[train]\nlr = fast\n", "cannot read"),
    ("[model]\nbinarize_conditioning = maybe\n", "boolean"),
    ("[model]\npool_plan = 5\n", "pool plan|pool_plan"),
    ("[model]\nconditioning = sometimes\n", "conditioning"),
    ("no header\n", "malformed"),
])
def test_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        cfgmod.loads(text)


def test_missing_files(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "x.cfg")
    with pytest.raises(ConfigError):
        cfgmod.shipped("huge")


def test_overrides():
    cfg = cfgmod.apply_overrides(RunConfig(), "train", {"lr": 5e-4, "clip": 0.5})
    assert cfg.train.lr == 5e-4 and cfg.train.clip == 0.5
    with pytest.raises(ConfigError):
        cfgmod.apply_overrides(cfg, "train", {"momentum": 0.9})
