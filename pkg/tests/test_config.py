import json

import pytest

from xray2ct.config import ConfigError, TrainConfig, dump_toml, from_dict, load_config


def test_defaults_match_training_protocol():
    cfg = TrainConfig().validate()
    assert (cfg.epochs, cfg.decay_start, cfg.lr, cfg.batch_size) == (100, 50, 2e-4, 2)
    assert (cfg.beta1, cfg.beta2) == (0.5, 0.999)
    w = cfg.weights
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (0.1, 10.0, 10.0, 0.01)


def test_toml_roundtrip(tmp_path):
    cfg = TrainConfig(name="x", epochs=7, decay_start=3, pcept_slices=4).replace(
        **{"weights.variant": "DAE-A", "generator.base_channels": 8, "backbone.loss_layers": ("relu1_2",)})
    path = tmp_path / "c.toml"
    path.write_text(dump_toml(cfg))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()


def test_json_and_relative_manifest(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"manifest": "data/manifest.json"}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.manifest == str((tmp_path / "data" / "manifest.json").resolve())


@pytest.mark.parametrize("data,path", [
    ({"weights": {"lambda1": "x"}}, "weights.lambda1"),
    ({"weights": {"bogus": 1}}, "weights.bogus"),
    ({"epochs": 1.5}, "epochs"),
    ({"generator": {"sgg_enabled": 1}}, "generator.sgg_enabled"),
    ({"nope": 1}, "nope"),
])
def test_field_paths_in_errors(data, path):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.field_path == path


@pytest.mark.parametrize("changes,path", [
    ({"decay_start": 100}, "decay_start"),
    ({"lr": 0.0}, "lr"),
    ({"weights.variant": "DAE-Z"}, "weights"),
    ({"generator.n_levels": 2}, "generator"),
])
def test_validation_errors(changes, path):
    with pytest.raises(ConfigError) as err:
        TrainConfig().replace(**changes).validate()
    assert err.value.field_path == path


def test_sync_propagates_switches():
    cfg = TrainConfig(view_mode="single").replace(**{"weights.variant": "none"})
    assert cfg.generator.view_mode == cfg.discriminator.view_mode == "single"
    assert cfg.discriminator.dae is False


def test_bad_toml(tmp_path):
    (tmp_path / "c.toml").write_text("epochs = = 3")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.toml")
