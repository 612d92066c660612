"""On-disk synthetic try-on datasets.

A dataset directory holds `manifest.json` plus four files per sample:

    NNNNN_source.png   person in the source pose
    NNNNN_garment.png  the flat garment
    NNNNN_target.png   ground truth: same person and garment, target pose
    NNNNN_pose.json    {"source": [[x, y, visible], ...], "target": [...]}

The manifest records every spec used for rendering and a SHA-256 checksum of
every file. Generation is a pure function of (n, seed, n_unseen).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from vestido.errors import ConfigurationError, DatasetError, IntegrityError, ValidationError
from vestido.synth import (
    IMAGE_SIZE,
    TRAIN_PALETTE,
    UNSEEN_PALETTE,
    GarmentSpec,
    PersonSpec,
    PoseSpec,
    garment_raster,
    image_to_tensor,
    person_raster,
    sample_garment,
    sample_person,
    sample_pose,
)
from vestido.tensor import Tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
ROLES = ("source", "garment", "target", "pose")

# SeedSequence stream tags
_SAMPLE_STREAM = 0
_PERSON_STREAM = 1
_UNSEEN_STREAM = 2


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class ManifestEntry:
    """Specs, file names and checksums of one sample.

    Attributes:
        index: Sample number (file prefix)
        person_id: Identity within the person pool
        person: Person appearance
        garment: Garment shown flat and worn in the target image
        source_garment: Garment worn in the source image (differs only for
            unseen-garment probes)
        source_pose: Pose of the source image
        target_pose: Pose of the target image
        files: Role → file name
        checksums: File name → SHA-256 hex digest
        unseen: Whether the garment comes from the held-out palette
    """

    index: int
    person_id: int
    person: PersonSpec
    garment: GarmentSpec
    source_garment: GarmentSpec
    source_pose: PoseSpec
    target_pose: PoseSpec
    files: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    unseen: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "person_id": self.person_id,
            "person": self.person.to_dict(),
            "garment": self.garment.to_dict(),
            "source_garment": self.source_garment.to_dict(),
            "source_pose": self.source_pose.to_list(),
            "target_pose": self.target_pose.to_list(),
            "files": self.files,
            "checksums": self.checksums,
            "unseen": self.unseen,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ManifestEntry:
        return cls(
            index=int(data["index"]),
            person_id=int(data["person_id"]),
            person=PersonSpec.from_dict(data["person"]),
            garment=GarmentSpec.from_dict(data["garment"]),
            source_garment=GarmentSpec.from_dict(data["source_garment"]),
            source_pose=PoseSpec.from_list(data["source_pose"]),
            target_pose=PoseSpec.from_list(data["target_pose"]),
            files=dict(data["files"]),
            checksums=dict(data["checksums"]),
            unseen=bool(data.get("unseen", False)),
        )


@dataclass
class Manifest:
    """Index of a generated dataset directory."""

    root: Path
    seed: int
    n: int
    entries: list[ManifestEntry]
    n_unseen: int = 0
    version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def seen_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if not e.unseen]

    @property
    def unseen_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.unseen]

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "n": self.n,
            "n_unseen": self.n_unseen,
            "seed": self.seed,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        try:
            text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
            path.write_text(text + "\n", encoding="utf-8")
        except OSError as e:
            logger.error("Cannot write manifest %s: %s", path, e)
            raise DatasetError(f"Cannot write manifest {path}: {e}") from e
        return path

    @classmethod
    def load(cls, root: Path | str) -> Manifest:
        """Read `manifest.json` from a dataset directory.

        Raises:
            DatasetError: If the manifest is missing or unreadable
            IntegrityError: If it is malformed or of another format version
        """
        root = Path(root)
        path = root / MANIFEST_NAME
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise DatasetError(f"No dataset manifest at {path}") from e
        except OSError as e:
            logger.error("Cannot read manifest %s: %s", path, e)
            raise DatasetError(f"Cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise IntegrityError(f"Manifest {path} is not valid JSON: {e}") from e

        if data.get("version") != MANIFEST_VERSION:
            raise IntegrityError(
                f"Manifest {path} has version {data.get('version')}, expected {MANIFEST_VERSION}"
            )
        try:
            entries = [ManifestEntry.from_dict(e) for e in data["entries"]]
            return cls(
                root=root,
                seed=int(data["seed"]),
                n=int(data["n"]),
                entries=entries,
                n_unseen=int(data.get("n_unseen", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise IntegrityError(f"Manifest {path} is malformed: {e}") from e


# --- Generation ---


def _write_sample(
    root: Path,
    index: int,
    person_id: int,
    person: PersonSpec,
    garment: GarmentSpec,
    source_garment: GarmentSpec,
    source_pose: PoseSpec,
    target_pose: PoseSpec,
    unseen: bool,
) -> ManifestEntry:
    prefix = f"{index:05d}"
    files = {role: f"{prefix}_{role}.{'json' if role == 'pose' else 'png'}" for role in ROLES}
    images = {
        "source": person_raster(person, source_garment, source_pose),
        "garment": garment_raster(garment),
        "target": person_raster(person, garment, target_pose),
    }
    checksums = {}
    try:
        for role, image in images.items():
            path = root / files[role]
            image.save(path, format="PNG")
            checksums[files[role]] = file_sha256(path)
        pose_path = root / files["pose"]
        pose_path.write_text(
            json.dumps({"source": source_pose.to_list(), "target": target_pose.to_list()}),
            encoding="utf-8",
        )
        checksums[files["pose"]] = file_sha256(pose_path)
    except OSError as e:
        logger.error("Cannot write sample %s in %s: %s", prefix, root, e)
        raise DatasetError(f"Cannot write sample {prefix} in {root}: {e}") from e
    return ManifestEntry(
        index=index,
        person_id=person_id,
        person=person,
        garment=garment,
        source_garment=source_garment,
        source_pose=source_pose,
        target_pose=target_pose,
        files=files,
        checksums=checksums,
        unseen=unseen,
    )


def generate_dataset(
    n: int,
    seed: int,
    out_dir: Path | str,
    n_unseen: int = 0,
    progress: bool = False,
) -> Manifest:
    """Render n triplets (plus n_unseen held-out-garment probes) into out_dir.

    Persons come from a pool of max(1, n // 4) identities. Every sample draws
    from its own generator seeded by (seed, index), so output is identical
    byte for byte across runs.

    Raises:
        ValidationError: If n < 1 or n_unseen < 0
        DatasetError: If files cannot be written (the path is in the message)
    """
    if n < 1:
        raise ValidationError(f"Dataset size must be at least 1, got {n}")
    if n_unseen < 0:
        raise ValidationError(f"n_unseen must be non-negative, got {n_unseen}")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error("Cannot create dataset directory %s: %s", root, e)
        raise DatasetError(f"Cannot create dataset directory {root}: {e}") from e

    pool_rng = _stream(seed, _PERSON_STREAM)
    persons = [sample_person(pool_rng) for _ in range(max(1, n // 4))]

    entries = []
    for index in tqdm(range(n), desc="gen-data", disable=not progress):
        rng = _stream(seed, _SAMPLE_STREAM, index)
        person_id = int(rng.integers(len(persons)))
        person = persons[person_id]
        garment = sample_garment(rng, TRAIN_PALETTE)
        source_pose = sample_pose(rng, person)
        target_pose = sample_pose(rng, person)
        entries.append(
            _write_sample(
                root, index, person_id, person, garment, garment, source_pose, target_pose, False
            )
        )

    for k in range(n_unseen):
        rng = _stream(seed, _UNSEEN_STREAM, k)
        person_id = int(rng.integers(len(persons)))
        person = persons[person_id]
        worn = sample_garment(rng, TRAIN_PALETTE)
        garment = sample_garment(rng, UNSEEN_PALETTE)
        source_pose = sample_pose(rng, person)
        target_pose = sample_pose(rng, person)
        entries.append(
            _write_sample(
                root, n + k, person_id, person, garment, worn, source_pose, target_pose, True
            )
        )

    manifest = Manifest(root=root, seed=seed, n=n, entries=entries, n_unseen=n_unseen)
    path = manifest.save()
    logger.info("Wrote %d samples (%d unseen) to %s", len(entries), n_unseen, path.parent)
    return manifest


# --- Loading ---


@dataclass
class TripletSample:
    """One decoded sample with images in [−1, 1] (3×64×64)."""

    index: int
    person_id: int
    source: Tensor
    garment: Tensor
    target: Tensor
    source_pose: PoseSpec
    target_pose: PoseSpec
    garment_spec: GarmentSpec
    unseen: bool = False


def _read_verified(manifest: Manifest, entry: ManifestEntry, role: str) -> bytes:
    name = entry.files[role]
    path = manifest.root / name
    try:
        payload = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"Missing dataset file {path}") from e
    except OSError as e:
        logger.error("Cannot read %s: %s", path, e)
        raise DatasetError(f"Cannot read dataset file {path}: {e}") from e
    expected = entry.checksums.get(name)
    if expected is not None and hashlib.sha256(payload).hexdigest() != expected:
        raise IntegrityError(f"Checksum mismatch for {path}")
    return payload


def _decode_png(payload: bytes, path: Path) -> Tensor:
    try:
        with Image.open(io.BytesIO(payload)) as image:
            return image_to_tensor(image.convert("RGB"))
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Corrupt image file {path}: {e}") from e


def load_triplet(manifest: Manifest, idx: int) -> TripletSample:
    """Decode sample `idx` after verifying every file's checksum.

    Raises:
        IndexError: If idx is out of range
        DatasetError: If a file is missing or undecodable (path in message)
        IntegrityError: If a checksum does not match
    """
    if not 0 <= idx < len(manifest):
        raise IndexError(f"Sample index {idx} out of range for {len(manifest)} samples")
    entry = manifest.entries[idx]
    images = {
        role: _decode_png(_read_verified(manifest, entry, role), manifest.root / entry.files[role])
        for role in ("source", "garment", "target")
    }
    pose_path = manifest.root / entry.files["pose"]
    try:
        poses = json.loads(_read_verified(manifest, entry, "pose").decode("utf-8"))
        source_pose = PoseSpec.from_list(poses["source"])
        target_pose = PoseSpec.from_list(poses["target"])
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, ValidationError) as e:
        raise DatasetError(f"Corrupt pose file {pose_path}: {e}") from e
    return TripletSample(
        index=entry.index,
        person_id=entry.person_id,
        source=images["source"],
        garment=images["garment"],
        target=images["target"],
        source_pose=source_pose,
        target_pose=target_pose,
        garment_spec=entry.garment,
        unseen=entry.unseen,
    )


@dataclass
class TripletBatch:
    """Stacked samples ready for the model.

    Poses are kept as keypoint lists; the model renders them to heatmaps.
    """

    source: Tensor
    garment: Tensor
    target: Tensor | None
    source_pose: list[list[list[float]]]
    target_pose: list[list[list[float]]]
    samples: list[TripletSample] = field(default_factory=list)

    def __len__(self) -> int:
        return self.source.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[TripletSample]) -> TripletBatch:
        if not samples:
            raise ValidationError("Cannot build a batch from zero samples")
        return cls(
            source=Tensor(np.stack([s.source.numpy() for s in samples])),
            garment=Tensor(np.stack([s.garment.numpy() for s in samples])),
            target=Tensor(np.stack([s.target.numpy() for s in samples])),
            source_pose=[s.source_pose.to_list() for s in samples],
            target_pose=[s.target_pose.to_list() for s in samples],
            samples=list(samples),
        )


def load_samples(manifest: Manifest, indices: Sequence[int]) -> list[TripletSample]:
    return [load_triplet(manifest, i) for i in indices]


def load_image_file(path: Path | str, size: int = IMAGE_SIZE) -> Tensor:
    """Read a user-supplied size×size PNG as a 3×H×W tensor in [−1, 1].

    Raises:
        DatasetError: If the file is missing or not an image
        ValidationError: If the image is not size×size
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as e:
        raise DatasetError(f"Missing image file {path}") from e
    except OSError as e:
        raise DatasetError(f"Cannot read image file {path}: {e}") from e
    image = _decode_png(payload, path)
    if image.shape[1:] != (size, size):
        raise ValidationError(
            f"{path} is {image.shape[2]}×{image.shape[1]}, expected {size}×{size}"
        )
    return image


def load_pose_file(path: Path | str, key: str = "target") -> PoseSpec:
    """Read a pose from JSON: a bare joint list, or a pose file's `key` entry.

    Raises:
        DatasetError: If the file is missing or not valid JSON
        ValidationError: If the keypoints do not form an in-frame pose
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DatasetError(f"Missing pose file {path}") from e
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read pose file {path}: {e}") from e
    if isinstance(data, dict):
        if key not in data:
            raise ValidationError(f"Pose file {path} has no {key!r} entry")
        data = data[key]
    try:
        pose = PoseSpec.from_list(data)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Malformed keypoints in {path}: {e}") from e
    pose.validate()
    return pose


def iterate_batches(
    samples: Sequence[TripletSample],
    batch_size: int,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> Iterator[TripletBatch]:
    """One epoch of batches; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        yield TripletBatch.from_samples([samples[i] for i in order[start : start + batch_size]])


def split_by_person(
    manifest: Manifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, list[int]]:
    """Train/val/test sample indices with disjoint person identities.

    Identities are shuffled with `seed` and assigned to splits by cumulative
    fraction of identities. Unseen-garment probes are excluded.

    Raises:
        ConfigurationError: If fractions are negative or do not sum to 1
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigurationError(f"Split fractions must be three values summing to 1, got {fractions}")
    seen = manifest.seen_indices
    persons = sorted({manifest.entries[i].person_id for i in seen})
    order = np.random.default_rng(seed).permutation(len(persons))
    cuts = np.round(np.cumsum(fractions) * len(persons)).astype(int)
    assignment = {}
    for rank, p in enumerate(order):
        split = int(np.searchsorted(cuts, rank, side="right"))
        assignment[persons[p]] = ("train", "val", "test")[min(split, 2)]
    splits: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i in seen:
        splits[assignment[manifest.entries[i].person_id]].append(i)
    return splits
