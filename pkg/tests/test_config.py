"""Tests for the flat YAML configuration."""

import dataclasses

import pytest

from incmad.config import Config, config_hash, load_config, model_settings, save_config


class TestConfig:
    def test_defaults_valid(self):
        cfg = Config()
        assert cfg.seeds == [0, 1, 2, 3]
        assert cfg.lambdas == [1.0, 1.0, 1.0, 1.0]
        assert cfg.setting == "6-1 with 4 steps"

    def test_roundtrip(self, tmp_path):
        cfg = Config(seeds=[7], image_size=32, channels=[4, 6, 8, 12], lr=5e-4)
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        back = load_config(path)
        assert dataclasses.asdict(back) == dataclasses.asdict(cfg)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        save_config(Config(), path)
        path.write_text(path.read_text() + "mystery_knob: 3\n")
        with pytest.raises(ValueError, match="mystery_knob"):
            load_config(path)

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("- just\n- a\n- list\n")
        with pytest.raises(ValueError, match="mapping"):
            load_config(path)

    def test_validation(self):
        with pytest.raises(ValueError):
            Config(seeds=[])
        with pytest.raises(ValueError):
            Config(channels=[1, 2, 3])
        with pytest.raises(ValueError):
            Config(lambdas=[1.0])
        with pytest.raises(ValueError):
            Config(batch_size=0)
        with pytest.raises(ValueError):
            Config(epochs_base=-1)

    def test_hash_stable_and_sensitive(self):
        a = Config()
        b = Config()
        assert config_hash(a) == config_hash(b)
        c = Config(lr=2e-3)
        assert config_hash(a) != config_hash(c)

    def test_model_settings_mapping(self):
        cfg = Config(image_size=32, channels=[4, 6, 8, 12], c_fu=8, d_z=3,
                     use_mamba=False, modalities=["rgb"])
        ms = model_settings(cfg, n_objects=5)
        assert ms.n_objects == 5
        assert ms.channels == (4, 6, 8, 12)
        assert ms.use_mamba is False
        assert ms.modalities == ("rgb",)
        ms2 = model_settings(cfg)
        assert ms2.n_objects == cfg.n_objects
