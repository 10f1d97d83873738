"""Tests for config dataclasses and key=value parsing."""

import pytest

from egospan.config import (NetConfig, TrainConfig, apply_settings,
                            load_config, parse_settings)
from egospan.exceptions import ConfigError
from egospan.volume import DEFAULT_VOLUME_SIDE


class TestDefaults:
    def test_net_defaults(self):
        cfg = NetConfig()
        assert cfg.motion_feature_dim == 512
        assert cfg.balanced_dim == 16
        assert cfg.variant == "fused"
        assert cfg.use_height_channel and cfg.use_coordinate_maps

    def test_train_defaults(self):
        cfg = TrainConfig()
        assert cfg.optimizer == "adam"
        assert cfg.epochs == 30 and cfg.batch_size == 32
        assert cfg.alpha == 0.01 and cfg.beta == 0.01 and cfg.gamma == 0.001
        assert cfg.volume_side == DEFAULT_VOLUME_SIDE

    def test_invalid_variant_rejected(self):
        with pytest.raises(ConfigError):
            NetConfig(variant="everything")

    def test_decoder_stage_count_checked(self):
        with pytest.raises(ConfigError):
            NetConfig(seg_encoder_channels=(8, 12),
                      seg_decoder_channels=(16, 12, 8))

    def test_invalid_optimizer_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="adagrad")

    def test_negative_loss_weight_rejected(self):
        for name in ("alpha", "beta", "gamma"):
            with pytest.raises(ConfigError):
                TrainConfig(**{name: -0.1})

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)


class TestApplySettings:
    def test_overrides_and_coercion(self):
        cfg = apply_settings(TrainConfig(), [
            ("epochs", "5"),
            ("learning_rate", "0.01"),
            ("optimizer", "sgd"),
            ("deterministic", "false"),
        ])
        assert cfg.epochs == 5
        assert cfg.learning_rate == 0.01
        assert cfg.optimizer == "sgd"
        assert cfg.deterministic is False

    def test_original_left_untouched(self):
        base = TrainConfig()
        apply_settings(base, [("epochs", "1")])
        assert base.epochs == 30

    def test_tuple_coercion(self):
        cfg = apply_settings(NetConfig(), [("motion_channels", "4, 8, 16")])
        assert cfg.motion_channels == (4, 8, 16)

    def test_boolean_spellings(self):
        for text, expect in (("yes", True), ("on", True), ("1", True),
                             ("no", False), ("off", False), ("0", False)):
            cfg = apply_settings(TrainConfig(), [("preflight", text)])
            assert cfg.preflight is expect

    def test_unknown_key_rejected_with_listing(self):
        with pytest.raises(ConfigError) as err:
            apply_settings(TrainConfig(), [("epochz", "10")])
        assert "epochz" in str(err.value)
        assert "epochs" in str(err.value)

    def test_bad_value_types_rejected(self):
        with pytest.raises(ConfigError):
            apply_settings(TrainConfig(), [("epochs", "many")])
        with pytest.raises(ConfigError):
            apply_settings(TrainConfig(), [("learning_rate", "fast")])
        with pytest.raises(ConfigError):
            apply_settings(TrainConfig(), [("deterministic", "maybe")])
        with pytest.raises(ConfigError):
            apply_settings(NetConfig(), [("motion_channels", "4,eight")])

    def test_validation_still_runs_on_overrides(self):
        with pytest.raises(ConfigError):
            apply_settings(TrainConfig(), [("optimizer", "adagrad")])


class TestParseSettings:
    def test_skips_blanks_and_comments(self):
        pairs = parse_settings("\n# a comment\nepochs = 3\n\nseed=9\n")
        assert pairs == [("epochs", "3"), ("seed", "9")]

    def test_line_without_equals_rejected(self):
        with pytest.raises(ConfigError) as err:
            parse_settings("epochs = 3\njust words\n")
        assert "line 2" in str(err.value)

    def test_value_may_contain_equals(self):
        assert parse_settings("note = a=b") == [("note", "a=b")]


class TestLoadConfig:
    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("# training overrides\nepochs = 2\n"
                        "optimizer = sgd\nmomentum = 0.5\n")
        cfg = load_config(path, TrainConfig())
        assert cfg.epochs == 2
        assert cfg.optimizer == "sgd"
        assert cfg.momentum == 0.5

    def test_unknown_key_in_file_rejected(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("width = 4\n")
        with pytest.raises(ConfigError):
            load_config(path, NetConfig())
