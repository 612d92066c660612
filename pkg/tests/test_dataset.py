"""Tests for dataset generation, loading and splits."""

import json
import re
from pathlib import Path

import numpy as np
import pytest

from vestido.dataset import (
    MANIFEST_NAME,
    Manifest,
    TripletBatch,
    generate_dataset,
    iterate_batches,
    load_samples,
    load_triplet,
    split_by_person,
)
from vestido.errors import ConfigurationError, DatasetError, IntegrityError, ValidationError
from vestido.synth import TRAIN_PALETTE, UNSEEN_PALETTE


class TestGenerateDataset:
    """Tests for generate_dataset."""

    def test_layout(self, manifest: Manifest, dataset_dir: Path) -> None:
        assert len(manifest) == 18
        assert (dataset_dir / MANIFEST_NAME).exists()
        for suffix in ("source.png", "garment.png", "target.png", "pose.json"):
            assert (dataset_dir / f"00000_{suffix}").exists()

    def test_byte_identical_regeneration(self, tmp_path: Path, dataset_dir: Path) -> None:
        """Test that (n, seed, n_unseen) fixes every file byte for byte."""
        again = generate_dataset(16, seed=7, out_dir=tmp_path, n_unseen=2)
        for entry in again.entries:
            for name in entry.files.values():
                assert (tmp_path / name).read_bytes() == (dataset_dir / name).read_bytes()

    def test_seed_changes_output(self, tmp_path: Path, dataset_dir: Path) -> None:
        generate_dataset(2, seed=8, out_dir=tmp_path)
        assert (tmp_path / "00000_source.png").read_bytes() != (dataset_dir / "00000_source.png").read_bytes()

    def test_person_pool(self, manifest: Manifest) -> None:
        """Test that identities come from a pool of n // 4 persons."""
        assert {e.person_id for e in manifest.entries} <= set(range(4))

    def test_same_person_in_triplet(self, manifest: Manifest) -> None:
        """Test that source and target differ only in pose for seen samples."""
        for entry in manifest.entries[:16]:
            assert entry.source_garment == entry.garment
            assert entry.source_pose != entry.target_pose

    def test_unseen_entries(self, manifest: Manifest) -> None:
        assert manifest.unseen_indices == [16, 17]
        for i in manifest.unseen_indices:
            entry = manifest.entries[i]
            assert entry.garment.base in UNSEEN_PALETTE
            assert entry.source_garment.base in TRAIN_PALETTE
        for i in manifest.seen_indices:
            assert manifest.entries[i].garment.base in TRAIN_PALETTE

    @pytest.mark.parametrize(("n", "n_unseen"), [(0, 0), (4, -1)])
    def test_invalid_sizes(self, tmp_path: Path, n: int, n_unseen: int) -> None:
        with pytest.raises(ValidationError):
            generate_dataset(n, seed=0, out_dir=tmp_path, n_unseen=n_unseen)

    def test_unwritable_directory(self, tmp_path: Path) -> None:
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DatasetError, match=re.escape(str(blocker))):
            generate_dataset(1, seed=0, out_dir=blocker / "data")


class TestManifest:
    """Tests for Manifest.load."""

    def test_round_trip(self, manifest: Manifest, dataset_dir: Path) -> None:
        again = Manifest.load(dataset_dir)
        assert again.to_dict() == manifest.to_dict()

    def test_missing(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="manifest"):
            Manifest.load(tmp_path)

    def test_invalid_json(self, tmp_path: Path) -> None:
        (tmp_path / MANIFEST_NAME).write_text("{not json")
        with pytest.raises(IntegrityError):
            Manifest.load(tmp_path)

    def test_wrong_version(self, tmp_path: Path) -> None:
        (tmp_path / MANIFEST_NAME).write_text(json.dumps({"version": 99, "entries": []}))
        with pytest.raises(IntegrityError, match="version"):
            Manifest.load(tmp_path)


class TestLoadTriplet:
    """Tests for load_triplet."""

    @pytest.fixture
    def copy(self, tmp_path: Path) -> Manifest:
        return generate_dataset(2, seed=3, out_dir=tmp_path)

    def test_decoded_sample(self, manifest: Manifest) -> None:
        sample = load_triplet(manifest, 0)
        for image in (sample.source, sample.garment, sample.target):
            assert image.shape == (3, 64, 64)
            assert -1.0 <= image.numpy().min() and image.numpy().max() <= 1.0
        assert sample.target_pose == manifest.entries[0].target_pose

    def test_index_out_of_range(self, manifest: Manifest) -> None:
        with pytest.raises(IndexError):
            load_triplet(manifest, len(manifest))

    def test_tampered_file(self, copy: Manifest) -> None:
        """Test that a modified image fails its checksum."""
        path = copy.root / copy.entries[1].files["target"]
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(IntegrityError, match=re.escape(str(path))):
            load_triplet(copy, 1)
        load_triplet(copy, 0)

    def test_missing_file(self, copy: Manifest) -> None:
        path = copy.root / copy.entries[0].files["pose"]
        path.unlink()
        with pytest.raises(DatasetError, match=re.escape(str(path))):
            load_triplet(copy, 0)


class TestBatches:
    """Tests for TripletBatch and iterate_batches."""

    def test_stacking(self, manifest: Manifest) -> None:
        batch = TripletBatch.from_samples(load_samples(manifest, [0, 1, 2]))
        assert len(batch) == 3
        assert batch.target.shape == (3, 3, 64, 64)
        assert len(batch.target_pose) == 3 and len(batch.target_pose[0]) == 13

    def test_empty_batch(self) -> None:
        with pytest.raises(ValidationError):
            TripletBatch.from_samples([])

    def test_epoch_covers_samples(self, manifest: Manifest) -> None:
        samples = load_samples(manifest, range(5))
        batches = list(iterate_batches(samples, 2, np.random.default_rng(0)))
        assert [len(b) for b in batches] == [2, 2, 1]
        seen = sorted(s.index for b in batches for s in b.samples)
        assert seen == [0, 1, 2, 3, 4]

    def test_invalid_batch_size(self, manifest: Manifest) -> None:
        with pytest.raises(ConfigurationError):
            next(iterate_batches(load_samples(manifest, [0]), 0, np.random.default_rng(0)))


class TestSplitByPerson:
    """Tests for split_by_person."""

    def test_persons_disjoint(self, manifest: Manifest) -> None:
        splits = split_by_person(manifest, (0.5, 0.25, 0.25), seed=1)
        persons = {
            name: {manifest.entries[i].person_id for i in indices} for name, indices in splits.items()
        }
        assert not persons["train"] & persons["val"]
        assert not persons["train"] & persons["test"]
        assert not persons["val"] & persons["test"]

    def test_covers_seen_samples_only(self, manifest: Manifest) -> None:
        splits = split_by_person(manifest)
        combined = sorted(i for indices in splits.values() for i in indices)
        assert combined == manifest.seen_indices

    def test_deterministic(self, manifest: Manifest) -> None:
        assert split_by_person(manifest, seed=5) == split_by_person(manifest, seed=5)

    def test_train_only(self, manifest: Manifest) -> None:
        splits = split_by_person(manifest, (1.0, 0.0, 0.0))
        assert splits["val"] == [] and splits["test"] == []

    @pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.5, 0.2, 0.2)])
    def test_invalid_fractions(self, manifest: Manifest, fractions: tuple) -> None:
        with pytest.raises(ConfigurationError):
            split_by_person(manifest, fractions)
