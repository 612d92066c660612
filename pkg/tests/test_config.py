"""Tests for the configuration module."""

from pathlib import Path

import pytest

from vestido.config import (
    DEFAULT_CONFIG_TEMPLATE,
    PRESETS,
    ModelSection,
    RunConfig,
    RunSection,
    TrainingSection,
    load_config,
    write_default_config,
)
from vestido.errors import ConfigurationError, DatasetError


class TestSections:
    """Tests for the section dataclasses."""

    def test_default_values(self) -> None:
        """Test default run values."""
        config = RunSection()
        assert config.seed == 0
        assert config.out == "runs/default"
        assert config.threads == 1

    def test_to_dict(self) -> None:
        """Test converting to dictionary."""
        assert RunSection(seed=3).to_dict() == {
            "seed": 3,
            "out": "runs/default",
            "threads": 1,
            "log_every": 50,
        }

    def test_from_dict_partial(self) -> None:
        """Test that missing keys keep their defaults."""
        config = TrainingSection.from_dict({"batch_size": 24})
        assert config.batch_size == 24
        assert config.p_drop == 0.2

    def test_from_dict_layers_over_base(self) -> None:
        base = TrainingSection(steps=10)
        config = TrainingSection.from_dict({"batch_size": 2}, base)
        assert (config.steps, config.batch_size) == (10, 2)

    def test_int_accepted_for_float(self) -> None:
        """Test that `lambda_rec = 1` parses as 1.0."""
        config = TrainingSection.from_dict({"lambda_rec": 1})
        assert isinstance(config.lambda_rec, float)

    def test_unknown_key(self) -> None:
        """Test that typos are reported with their section."""
        with pytest.raises(ConfigurationError, match=r"\[training\]: bach_size"):
            TrainingSection.from_dict({"bach_size": 3})

    @pytest.mark.parametrize(
        ("data", "where"),
        [
            ({"batch_size": "4"}, "training.batch_size"),
            ({"batch_size": True}, "training.batch_size"),
            ({"p_drop": float("inf")}, "training.p_drop"),
        ],
    )
    def test_wrong_type(self, data: dict, where: str) -> None:
        with pytest.raises(ConfigurationError, match=where):
            TrainingSection.from_dict(data)

    @pytest.mark.parametrize(
        "data", [{"p_drop": 1.5}, {"batch_size": 0}, {"lambda_rec": -1.0}, {"steps": 0, "epochs": 0}]
    )
    def test_out_of_range(self, data: dict) -> None:
        with pytest.raises(ConfigurationError):
            TrainingSection.from_dict(data)

    def test_heads_must_divide_widths(self) -> None:
        with pytest.raises(ConfigurationError, match="encoder_heads"):
            ModelSection(widths=[6, 12, 24], encoder_heads=4)

    def test_attention_heads(self) -> None:
        """Test the four-head default and its divisibility check."""
        assert ModelSection().attention_heads == 4
        assert "attention_heads = 4" in DEFAULT_CONFIG_TEMPLATE
        with pytest.raises(ConfigurationError, match="attention_heads"):
            ModelSection(widths=[6, 12, 24], encoder_heads=2, appearance_heads=2)

    def test_image_size_fixed(self) -> None:
        with pytest.raises(ConfigurationError):
            ModelSection(image_size=128)

    def test_list_elements_checked(self) -> None:
        with pytest.raises(ConfigurationError, match="model.widths"):
            ModelSection.from_dict({"widths": [8, "16", 32]})


class TestRunConfig:
    """Tests for RunConfig."""

    def test_default_preset(self) -> None:
        config = RunConfig.from_dict({})
        assert config.preset == "desk"
        assert config.data.n == 2000
        assert config.model.widths == [64, 128, 256]

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_are_valid(self, name: str) -> None:
        assert RunConfig.from_preset(name).preset == name

    def test_paper_preset(self) -> None:
        config = RunConfig.from_preset("paper")
        assert config.data.n == 6014
        assert config.training.epochs == 30
        assert config.training.batch_size == 24

    def test_file_overrides_preset(self) -> None:
        config = RunConfig.from_dict({"preset": "smoke", "training": {"steps": 7}})
        assert config.training.steps == 7
        assert config.training.batch_size == 4
        assert config.model.widths == [16, 32, 64]

    def test_explicit_preset_wins(self) -> None:
        config = RunConfig.from_dict({"preset": "paper"}, preset="smoke")
        assert config.preset == "smoke"

    def test_unknown_preset(self) -> None:
        with pytest.raises(ConfigurationError, match="Unknown preset 'huge'"):
            RunConfig.from_dict({}, preset="huge")

    def test_unknown_section(self) -> None:
        with pytest.raises(ConfigurationError, match="logging"):
            RunConfig.from_dict({"logging": {}})

    def test_toml_round_trip(self, tmp_path: Path) -> None:
        """Test that a dumped configuration parses back to the same values."""
        original = RunConfig.from_preset("overfit")
        path = tmp_path / "dumped.toml"
        path.write_text(original.to_toml())
        again = load_config(path)
        assert again.to_dict() == original.to_dict()


class TestLoadConfig:
    """Tests for load_config and write_default_config."""

    def test_no_file_uses_preset(self) -> None:
        assert load_config(preset="smoke").data.n == 16

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.toml"
        path.write_text("[run\nseed = ")
        with pytest.raises(ConfigurationError, match="Invalid TOML"):
            load_config(path)

    def test_reads_values(self, tmp_path: Path) -> None:
        path = tmp_path / "vestido.toml"
        path.write_text('preset = "smoke"\n\n[run]\nseed = 11\n')
        config = load_config(path)
        assert config.run.seed == 11
        assert config.preset == "smoke"

    def test_template_matches_defaults(self, tmp_path: Path) -> None:
        """Test that the commented template spells out the desk defaults."""
        path = write_default_config(tmp_path / "vestido.toml")
        assert path.read_text() == DEFAULT_CONFIG_TEMPLATE
        assert load_config(path).to_dict() == RunConfig.from_preset("desk").to_dict()

    def test_refuses_overwrite(self, tmp_path: Path) -> None:
        path = tmp_path / "vestido.toml"
        path.write_text("")
        with pytest.raises(ConfigurationError, match="overwrite"):
            write_default_config(path)
        write_default_config(path, overwrite=True)
        assert path.read_text() == DEFAULT_CONFIG_TEMPLATE
