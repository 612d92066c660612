"""Tests for the command implementations and the typer entry point."""

import csv
import itertools
import json
import math
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from typer.testing import CliRunner

from vestido import cli, main
from vestido.checkpoint import load_checkpoint
from vestido.commands import (
    RunPaths,
    cmd_ablate,
    cmd_eval,
    cmd_gen_data,
    cmd_probe,
    cmd_sample,
    cmd_train,
    cmd_train_vae,
    generate_outputs,
    load_frozen_vae,
    load_manifest,
    load_trained_model,
    paired_comparison,
    split_indices,
    training_batches,
)
from vestido.config import RunConfig, load_config
from vestido.dataset import Manifest, load_samples
from vestido.diffusion import GuidanceWeights
from vestido.errors import (
    DatasetError,
    DependencyError,
    IntegrityError,
    UsageError,
    ValidationError,
)
from vestido.synth import tensor_to_image


def read_losses(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as handle:
        return list(csv.DictReader(handle))


def with_overrides(config: RunConfig, **sections: dict) -> RunConfig:
    data = config.to_dict()
    for name, values in sections.items():
        data[name] = {**data[name], **values}
    return RunConfig.from_dict(data)


@pytest.fixture
def trained(tiny_config: RunConfig) -> RunConfig:
    """A tiny run with dataset, VAE and try-on checkpoints in place."""
    cmd_gen_data(tiny_config)
    cmd_train_vae(tiny_config)
    cmd_train(tiny_config)
    return tiny_config


class TestGenData:
    """Tests for cmd_gen_data."""

    def test_writes_configured_size(self, tiny_config: RunConfig) -> None:
        manifest = cmd_gen_data(tiny_config)
        assert len(manifest) == 18
        assert (Path(tiny_config.data.path) / "manifest.json").exists()

    def test_seed_fixes_output(self, tiny_config: RunConfig, tmp_path: Path) -> None:
        cmd_gen_data(tiny_config)
        other = with_overrides(tiny_config, data={"path": str(tmp_path / "again")})
        cmd_gen_data(other)
        for name in ("manifest.json", "00003_target.png"):
            first = (Path(tiny_config.data.path) / name).read_bytes()
            assert (tmp_path / "again" / name).read_bytes() == first


class TestTraining:
    """Tests for cmd_train_vae and cmd_train."""

    def test_smoke_run(self, trained: RunConfig) -> None:
        paths = RunPaths.of(trained)
        assert paths.vae_checkpoint.exists()
        assert paths.vton_checkpoint.exists()
        vae_rows = read_losses(paths.vae_loss)
        rows = read_losses(paths.train_loss)
        assert [r["step"] for r in vae_rows] == ["1", "2", "3"]
        assert [r["step"] for r in rows] == ["1", "2"]
        for row in rows:
            assert all(np.isfinite(float(row[k])) for k in ("l_mse", "l_rec", "l_overall"))

    def test_restored_models_are_ready(self, trained: RunConfig) -> None:
        assert load_frozen_vae(trained).ready
        model = load_trained_model(trained)
        assert model.ready
        assert all(not p.requires_grad for _, p in model.named_parameters())

    def test_checkpoint_records_config(self, trained: RunConfig) -> None:
        """Test that the snapshot rebuilds the effective configuration."""
        ckpt = load_checkpoint(RunPaths.of(trained).vton_checkpoint, kind="vton")
        assert RunConfig.from_dict(ckpt.config).to_dict() == trained.to_dict()

    def test_missing_dataset(self, tiny_config: RunConfig) -> None:
        with pytest.raises(DatasetError, match="manifest"):
            cmd_train_vae(tiny_config)

    def test_missing_vae(self, tiny_config: RunConfig) -> None:
        cmd_gen_data(tiny_config)
        with pytest.raises(DependencyError, match="train-vae"):
            cmd_train(tiny_config)

    def test_same_seed_same_losses(self, trained: RunConfig, tmp_path: Path) -> None:
        again = with_overrides(trained, run={"out": str(tmp_path / "again")})
        cmd_train_vae(again)
        cmd_train(again)
        assert read_losses(RunPaths.of(again).train_loss) == read_losses(
            RunPaths.of(trained).train_loss
        )

    def test_resume_continues_trajectory(self, tiny_config: RunConfig, tmp_path: Path) -> None:
        """Test that stopping after two steps and resuming matches one straight run."""
        cmd_gen_data(tiny_config)
        full = with_overrides(tiny_config, training={"steps": 4})
        cmd_train_vae(full)
        cmd_train(full)

        split_dir = tmp_path / "split"
        split_dir.mkdir()
        shutil.copy(RunPaths.of(full).vae_checkpoint, split_dir / "vae.ckpt")
        first = with_overrides(tiny_config, run={"out": str(split_dir)})
        cmd_train(first)
        second = with_overrides(first, training={"steps": 4})
        cmd_train(second, resume=True)

        assert read_losses(RunPaths.of(second).train_loss) == read_losses(
            RunPaths.of(full).train_loss
        )

    def test_vae_resume(self, tiny_config: RunConfig, tmp_path: Path) -> None:
        cmd_gen_data(tiny_config)
        cmd_train_vae(tiny_config)
        short = with_overrides(
            tiny_config, run={"out": str(tmp_path / "short")}, training={"vae_steps": 1}
        )
        cmd_train_vae(short)
        cmd_train_vae(with_overrides(short, training={"vae_steps": 3}), resume=True)
        assert read_losses(RunPaths.of(short).vae_loss) == read_losses(
            RunPaths.of(tiny_config).vae_loss
        )
    def test_epochs_set_step_count(self, tiny_config: RunConfig) -> None:
        """Test that one epoch runs ceil(train / batch) steps."""
        cmd_gen_data(tiny_config)
        config = with_overrides(tiny_config, training={"epochs": 1})
        cmd_train_vae(config)
        cmd_train(config)
        train = split_indices(config, load_manifest(config), "train")
        rows = read_losses(RunPaths.of(config).train_loss)
        assert len(rows) == math.ceil(len(train) / min(4, len(train)))


class TestTrainingBatches:
    """Tests for the epoch-shuffled batch stream behind cmd_train."""

    @pytest.fixture
    def samples(self, manifest: Manifest) -> list:
        return load_samples(manifest, range(6))

    def epochs(self, samples: list, count: int, start_step: int = 0) -> list[tuple[int, list[int]]]:
        stream = training_batches(samples, 4, seed=7, start_step=start_step)
        return [(step, [s.index for s in b.samples]) for step, b in itertools.islice(stream, count)]

    def test_each_epoch_visits_every_sample_once(self, samples: list) -> None:
        batches = self.epochs(samples, 4)
        assert [step for step, _ in batches] == [1, 2, 3, 4]
        assert [len(chosen) for _, chosen in batches] == [4, 2, 4, 2]
        for epoch in (batches[:2], batches[2:]):
            assert sorted(i for _, chosen in epoch for i in chosen) == list(range(6))

    def test_resume_mid_epoch(self, samples: list) -> None:
        """Test that starting at step 3 yields what a fresh stream yields from step 4."""
        assert self.epochs(samples, 3, start_step=3) == self.epochs(samples, 6)[3:]

    def test_seeded(self, samples: list) -> None:
        assert self.epochs(samples, 4) == self.epochs(samples, 4)



class TestSample:
    """Tests for cmd_sample and generate_outputs."""

    def test_writes_sample_and_grid(self, trained: RunConfig) -> None:
        path = cmd_sample(trained, index=3)
        assert path.name == "sample_00003.png"
        with Image.open(path) as image:
            assert image.size == (64, 64)
        with Image.open(path.parent / "grid_00003.png") as grid:
            assert grid.size == (4 * 64, 64)

    def test_fixed_seed_is_byte_identical(self, trained: RunConfig, tmp_path: Path) -> None:
        a = cmd_sample(trained, index=1, out=tmp_path / "a")
        b = cmd_sample(trained, index=1, out=tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_both_mode_is_default(self, trained: RunConfig) -> None:
        model, vae = load_trained_model(trained), load_frozen_vae(trained)
        samples = load_samples(load_manifest(trained), [0, 1])
        default = generate_outputs(trained, model, vae, samples)
        both = generate_outputs(trained, model, vae, samples, bias_mode="both")
        np.testing.assert_array_equal(default, both)

    def test_index_out_of_range(self, trained: RunConfig) -> None:
        with pytest.raises(IndexError):
            cmd_sample(trained, index=99)

    def test_missing_checkpoint(self, tiny_config: RunConfig) -> None:
        with pytest.raises(DependencyError, match="vestido train"):
            cmd_sample(tiny_config)

    def test_corrupt_checkpoint(self, trained: RunConfig) -> None:
        path = RunPaths.of(trained).vton_checkpoint
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            cmd_sample(trained)

    def test_pairs_source_with_another_garment(self, trained: RunConfig) -> None:
        """Test that entry 0's person can be dressed in entry 1's garment."""
        path = cmd_sample(trained, source=0, garment=1)
        assert path.name == "sample_00000_00000_00001.png"
        first, second = load_samples(load_manifest(trained), [0, 1])
        with Image.open(path.parent / "grid_00000_00000_00001.png") as grid:
            source = grid.crop((0, 0, 64, 64))
            garment = grid.crop((128, 0, 192, 64))
            assert source.tobytes() == tensor_to_image(first.source).tobytes()
            assert garment.tobytes() == tensor_to_image(second.garment).tobytes()

    def test_file_inputs_match_indices(self, trained: RunConfig, tmp_path: Path) -> None:
        """Test that a garment PNG and a pose file condition like their entries."""
        data = Path(trained.data.path)
        by_index = cmd_sample(trained, source=0, pose=2, garment=1, out=tmp_path / "a")
        by_file = cmd_sample(
            trained,
            source="0",
            pose=str(data / "00002_pose.json"),
            garment=str(data / "00001_garment.png"),
            out=tmp_path / "b",
        )
        assert by_file.name == "sample_00000_00002_pose_00001_garment.png"
        assert by_file.read_bytes() == by_index.read_bytes()

    def test_seed_override(self, trained: RunConfig, tmp_path: Path) -> None:
        default = cmd_sample(trained, index=1, out=tmp_path / "default")
        same = cmd_sample(trained, index=1, seed=trained.run.seed, out=tmp_path / "same")
        other = cmd_sample(trained, index=1, seed=trained.run.seed + 1, out=tmp_path / "other")
        assert same.read_bytes() == default.read_bytes()
        assert other.read_bytes() != default.read_bytes()

    def test_wrong_image_size(self, trained: RunConfig, tmp_path: Path) -> None:
        small = tmp_path / "small.png"
        Image.new("RGB", (32, 32)).save(small)
        with pytest.raises(ValidationError, match="32×32"):
            cmd_sample(trained, garment=str(small))

    def test_missing_input_file(self, trained: RunConfig, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="nowhere"):
            cmd_sample(trained, source=str(tmp_path / "nowhere.png"))


class TestEval:
    """Tests for cmd_eval and split handling."""

    def test_report_covers_split(self, trained: RunConfig) -> None:
        path = cmd_eval(trained, split="train")
        report = json.loads(path.read_text())
        expected = split_indices(trained, load_manifest(trained), "train")
        assert path == RunPaths.of(trained).root / "eval" / "train" / "report.json"
        assert [s["sample_id"] for s in report["samples"]] == expected
        assert report["aggregate"]["count"] == len(expected)
        assert report["aggregate"]["frechet"] is not None
        assert RunPaths.of(trained).feature_checkpoint.exists()

    def test_eval_limit(self, trained: RunConfig) -> None:
        limited = with_overrides(trained, metrics={"eval_limit": 2})
        report = json.loads(cmd_eval(limited, split="unseen").read_text())
        assert [s["sample_id"] for s in report["samples"]] == [16, 17]

    def test_empty_split(self, trained: RunConfig) -> None:
        """Test that four identities leave the test split empty at 80/10/10."""
        with pytest.raises(ValidationError, match="no samples"):
            cmd_eval(trained, split="test")

    def test_unknown_split(self, trained: RunConfig) -> None:
        with pytest.raises(UsageError, match="bogus"):
            cmd_eval(trained, split="bogus")


class TestAblateAndProbe:
    """Tests for cmd_ablate, cmd_probe and paired_comparison."""

    def test_paired_comparison(self) -> None:
        result = paired_comparison([0.1, 0.2, 0.5, 0.3], [0.2, 0.2, 0.4, 0.4])
        assert (result["wins"], result["losses"], result["ties"]) == (2, 1, 1)
        assert result["candidate_mean"] == pytest.approx(0.275)

    def test_paired_comparison_without_pairs(self) -> None:
        result = paired_comparison([], [])
        assert (result["pairs"], result["p_value"], result["candidate_mean"]) == (0, 1.0, None)

    def test_unknown_mode(self, tiny_config: RunConfig) -> None:
        with pytest.raises(UsageError, match="sideways"):
            cmd_ablate(tiny_config, modes=["both", "sideways"])

    def test_ablate_report(self, trained: RunConfig) -> None:
        path = cmd_ablate(trained, modes=["garment-only", "app-only", "gray-mask"])
        report = json.loads(path.read_text())
        assert report["split"] == "unseen"
        assert set(report["modes"]) == {"garment-only", "app-only", "gray-mask"}
        assert "vs_both" in report["modes"]["gray-mask"]
        assert "garment_only_vs_app_only" in report
        probes = load_samples(load_manifest(trained), [16, 17])
        striped = sum(s.garment_spec.pattern == "stripes" for s in probes)
        for mode in report["modes"].values():
            assert mode["vs_both"]["pairs"] == 2
            subset = mode["vs_both_striped"]
            assert subset["pairs"] == striped
            assert subset["wins"] + subset["losses"] + subset["ties"] == striped
            assert (subset["candidate_mean"] is None) == (striped == 0)
        with Image.open(path.parent / "grid.png") as grid:
            assert grid.size == (6 * 64, 2 * 64)

    def test_probe_report(self, trained: RunConfig) -> None:
        report = json.loads(cmd_probe(trained).read_text())
        assert report["split"] == "unseen"
        assert report["count"] == 2
        assert report["wins"] + report["losses"] + report["ties"] == 2


class TestEntryPoint:
    """Tests for argument handling and exit codes."""

    def run_main(self, monkeypatch: pytest.MonkeyPatch, *args: str) -> int:
        monkeypatch.setattr(sys, "argv", ["vestido", *args])
        with pytest.raises(SystemExit) as exc_info:
            main()
        return exc_info.value.code

    def test_unknown_preset_exit_code(self, monkeypatch: pytest.MonkeyPatch) -> None:
        assert self.run_main(monkeypatch, "--preset", "huge", "config", "show") == 3

    def test_missing_checkpoint_exit_code(
        self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path
    ) -> None:
        assert self.run_main(monkeypatch, "--out", str(tmp_path), "sample") == 4

    def test_unknown_option_exit_code(self, monkeypatch: pytest.MonkeyPatch) -> None:
        assert self.run_main(monkeypatch, "train", "--bogus") == 2

    def test_unknown_ablation_mode_exit_code(
        self, monkeypatch: pytest.MonkeyPatch, tmp_path: Path
    ) -> None:
        code = self.run_main(monkeypatch, "--out", str(tmp_path), "ablate", "--mode", "x")
        assert code == 2

    def test_config_init_and_show(self, tmp_path: Path) -> None:
        runner = CliRunner()
        path = tmp_path / "vestido.toml"
        result = runner.invoke(cli, ["config", "init", str(path)])
        assert result.exit_code == 0
        assert path.exists()

        result = runner.invoke(cli, ["--config", str(path), "--seed", "9", "config", "show"])
        assert result.exit_code == 0
        shown = tmp_path / "shown.toml"
        shown.write_text(result.stdout)
        config = load_config(shown)
        assert config.run.seed == 9
        assert config.model.widths == RunConfig.from_preset("desk").model.widths

    def test_config_init_refuses_overwrite(self, tmp_path: Path) -> None:
        path = tmp_path / "vestido.toml"
        path.write_text("")
        result = CliRunner().invoke(cli, ["config", "init", str(path)])
        assert result.exit_code != 0
        assert path.read_text() == ""

    def test_gen_data_command(self, tmp_path: Path) -> None:
        config = tmp_path / "vestido.toml"
        config.write_text(f'[data]\npath = "{(tmp_path / "data").as_posix()}"\nn = 4\nn_unseen = 0\n')
        result = CliRunner().invoke(cli, ["--preset", "smoke", "--config", str(config), "gen-data"])
        assert result.exit_code == 0
        assert len(json.loads((tmp_path / "data" / "manifest.json").read_text())["entries"]) == 4


@pytest.mark.slow
class TestOverfit:
    """End-to-end training on the eight-sample overfit preset."""

    @pytest.fixture(scope="class")
    def overfit(self, tmp_path_factory: pytest.TempPathFactory) -> RunConfig:
        root = tmp_path_factory.mktemp("overfit")
        config = RunConfig.from_dict(
            {"run": {"out": str(root / "run")}, "data": {"path": str(root / "data")}},
            preset="overfit",
        )
        cmd_gen_data(config)
        cmd_train_vae(config)
        cmd_train(config)
        return config

    def test_vae_reconstruction(self, overfit: RunConfig) -> None:
        rows = read_losses(RunPaths.of(overfit).vae_loss)
        assert np.mean([float(r["reconstruction"]) for r in rows[-20:]]) < 0.01

    def test_training_loss(self, overfit: RunConfig) -> None:
        rows = read_losses(RunPaths.of(overfit).train_loss)
        assert np.mean([float(r["l_overall"]) for r in rows[-20:]]) < 0.05

    def test_training_split_ssim(self, overfit: RunConfig) -> None:
        report = json.loads(cmd_eval(overfit, split="train").read_text())
        assert report["aggregate"]["ssim"] >= 0.85

    def test_guidance_weights_change_output(self, overfit: RunConfig, tmp_path: Path) -> None:
        off = GuidanceWeights(0.0, 0.0, 0.0)
        on = GuidanceWeights(2.0, 2.0, 2.0)
        a = cmd_sample(overfit, index=0, weights=off, out=tmp_path / "off")
        b = cmd_sample(overfit, index=0, weights=on, out=tmp_path / "on")
        assert a.read_bytes() != b.read_bytes()
