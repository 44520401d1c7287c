import json

import pytest

from prvipe.config import config_hash, load_config_file, resolve_train_config, save_config
from prvipe.errors import ConfigError
from prvipe.trainer import TrainConfig


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(data if isinstance(data, str) else json.dumps(data))
    return path


class TestResolve:
    def test_defaults(self):
        assert resolve_train_config() == TrainConfig()

    def test_file_overrides_defaults(self, tmp_path):
        values = load_config_file(_write(tmp_path, {"steps": 7, "kappa": 0.2}))
        config = resolve_train_config(values)
        assert (config.steps, config.kappa, config.width) == (7, 0.2, TrainConfig().width)

    def test_flags_override_file(self, tmp_path):
        values = load_config_file(_write(tmp_path, {"steps": 7, "kappa": 0.2}))
        config = resolve_train_config(values, {"steps": 9, "kappa": None})
        assert (config.steps, config.kappa) == (9, 0.2)

    @pytest.mark.parametrize("text, expected", [("on", True), ("off", False), ("true", True), (False, False)])
    def test_boolean_spellings(self, text, expected):
        assert resolve_train_config({"augmentation": text}).augmentation is expected

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            resolve_train_config({"stepz": 3})

    @pytest.mark.parametrize("values", [{"steps": "many"}, {"steps": 2.5}, {"augmentation": "maybe"},
                                        {"mix_ratio": 1.5}, {"batch_size": 2}, {"mode": "other"}])
    def test_bad_values(self, values):
        with pytest.raises(ConfigError):
            resolve_train_config(values)


class TestFile:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        with pytest.raises(ConfigError, match="line"):
            load_config_file(_write(tmp_path, '{"steps": 3,\n'))

    @pytest.mark.parametrize("text", ["[1, 2]", '{"steps": {"a": 1}}'])
    def test_non_flat(self, tmp_path, text):
        with pytest.raises(ConfigError):
            load_config_file(_write(tmp_path, text))

    def test_save_round_trip(self, tmp_path):
        config = TrainConfig(steps=12, augmentation=True, kappa=0.3)
        path = save_config(config, tmp_path / "out.json")
        assert resolve_train_config(load_config_file(path)) == config


class TestHash:
    def test_stable_and_sensitive(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))
        assert len(config_hash(TrainConfig())) == 64

    def test_dict_key_order_irrelevant(self):
        assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
