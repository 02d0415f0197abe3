import pytest

from langseg.config import ConfigError, ExperimentConfig, apply_overrides, load_config


def test_full_profile_defaults():
    cfg = load_config(profile="full")
    assert (cfg.optim.lr, cfg.optim.weight_decay) == (1e-4, 1e-4)
    assert (cfg.model.num_queries, cfg.model.layers, cfg.model.prompt_length) == (100, 6, 8)
    assert (cfg.loss.tau, cfg.loss.lambda_focal, cfg.loss.lambda_dice, cfg.loss.no_object_weight) == (0.07, 20, 1, 0.1)


def test_toy_profile():
    cfg = load_config()
    assert (cfg.model.num_queries, cfg.model.layers) == (20, 3)
    assert [d.dataset_id for d in cfg.data.datasets] == ["toyA", "toyB", "toyC"]
    assert set(cfg.policies()) == {"toyA", "toyB", "toyC"}


def test_overrides_parse_yaml_scalars():
    cfg = apply_overrides(load_config(), ["optim.lr=0.5", "model.encoder_widths=[4,4,8,8]", "data.task=panoptic"])
    assert cfg.optim.lr == 0.5 and cfg.model.encoder_widths == (4, 4, 8, 8) and cfg.data.task == "panoptic"


@pytest.mark.parametrize("bad", ["optim.nope=1", "nope.lr=1", "optim.lr", "model.heads=5"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(load_config(), [bad])


def test_yaml_file_round_trip(tmp_path):
    cfg = load_config(overrides=["seed=9"])
    path = tmp_path / "c.yaml"
    cfg.save(path)
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_partial_yaml_merges_over_profile(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("optim:\n  iterations: 7\n")
    cfg = load_config(path)
    assert cfg.optim.iterations == 7 and cfg.model.num_queries == 20


def test_unknown_profile_and_keys(tmp_path):
    with pytest.raises(ConfigError):
        load_config(profile="huge")
    path = tmp_path / "c.yaml"
    path.write_text("optim:\n  momentum: 0.9\n")
    with pytest.raises(ConfigError):
        load_config(path)
