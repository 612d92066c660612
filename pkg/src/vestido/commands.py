"""Command implementations behind the `vestido` CLI.

Each ``cmd_*`` function takes an effective `RunConfig`, reads and writes files
under ``config.run.out`` and returns the path of its main artifact. The typer
layer in `vestido.__init__` only parses arguments and maps errors to exit
codes.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import humanize
import numpy as np
from PIL import Image
from tqdm import tqdm

from vestido.checkpoint import load_checkpoint, save_checkpoint
from vestido.config import RunConfig
from vestido.dataset import (
    Manifest,
    TripletBatch,
    TripletSample,
    generate_dataset,
    iterate_batches,
    load_image_file,
    load_pose_file,
    load_samples,
    split_by_person,
)
from vestido.diffusion import GuidanceWeights, make_schedule, sample, training_loss
from vestido.encoders import VaeModel, render_heatmaps, vae_loss
from vestido.errors import DatasetError, DependencyError, NumericalError, UsageError, ValidationError
from vestido.metrics import (
    EvalReport,
    FeatureExtractor,
    SampleRecord,
    fit_feature_extractor,
    frechet_distance,
    psnr,
    sign_test,
    ssim,
    to_unit_range,
    torso_color_match,
    write_report,
)
from vestido.nn import Module
from vestido.optim import Adam
from vestido.synth import PATTERNS, PoseSpec, gray_mask_torso, tensor_to_image
from vestido.tensor import Tensor
from vestido.unet import BIAS_MODES, VtonModel

logger = logging.getLogger(__name__)

ABLATION_MODES = (*BIAS_MODES, "gray-mask")
SPLITS = ("train", "val", "test", "unseen")
PANEL = 64

# SeedSequence stream tags under the run seed
_VAE_INIT = 10
_VAE_TRAIN = 11
_MODEL_INIT = 20
_MODEL_TRAIN = 21
_MODEL_SHUFFLE = 22
_FEATURES = 30


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass(frozen=True)
class RunPaths:
    """Artifact locations inside a run directory."""

    root: Path

    @property
    def vae_checkpoint(self) -> Path:
        return self.root / "vae.ckpt"

    @property
    def vton_checkpoint(self) -> Path:
        return self.root / "vton.ckpt"

    @property
    def feature_checkpoint(self) -> Path:
        return self.root / "features.ckpt"

    @property
    def vae_loss(self) -> Path:
        return self.root / "vae_loss.csv"

    @property
    def train_loss(self) -> Path:
        return self.root / "train_loss.csv"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def validation(self) -> Path:
        return self.root / "validation"

    @classmethod
    def of(cls, config: RunConfig) -> RunPaths:
        return cls(Path(config.run.out))


class LossLog:
    """CSV loss curve; resumed runs append to the existing file."""

    def __init__(self, path: Path, columns: Sequence[str], append: bool = False) -> None:
        self.path = path
        self.columns = list(columns)
        fresh = not (append and path.exists())
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = path.open("w" if fresh else "a", newline="", encoding="utf-8")
        except OSError as e:
            logger.error("Cannot open loss log %s: %s", path, e)
            raise DatasetError(f"Cannot open loss log {path}: {e}") from e
        self._writer = csv.writer(self._handle)
        if fresh:
            self._writer.writerow(["step", *self.columns])

    def write(self, step: int, values: dict[str, float]) -> None:
        self._writer.writerow([step, *(repr(float(values[c])) for c in self.columns)])
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> LossLog:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _write_json(path: Path, data: dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error("Cannot write %s: %s", path, e)
        raise DatasetError(f"Cannot write {path}: {e}") from e
    return path


def _save_png(image: Image.Image, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.save(path, format="PNG")
    except OSError as e:
        logger.error("Cannot write image %s: %s", path, e)
        raise DatasetError(f"Cannot write image {path}: {e}") from e
    return path


# --- Models and data ---


def build_vae(config: RunConfig, rng: np.random.Generator | None = None) -> VaeModel:
    model = config.model
    return VaeModel(
        rng if rng is not None else _stream(config.run.seed, _VAE_INIT),
        base_channels=model.vae_channels,
        latent_channels=model.latent_channels,
        image_size=model.image_size,
    )


def build_model(config: RunConfig, rng: np.random.Generator | None = None) -> VtonModel:
    return VtonModel.from_config(
        config.model,
        config.schedule.num_steps,
        rng if rng is not None else _stream(config.run.seed, _MODEL_INIT),
    )


def load_frozen_vae(config: RunConfig) -> VaeModel:
    """Restore the VAE of this run and freeze it.

    Raises:
        DependencyError: If `train-vae` has not produced a checkpoint yet
    """
    path = RunPaths.of(config).vae_checkpoint
    if not path.exists():
        raise DependencyError(f"No VAE checkpoint at {path}; run `vestido train-vae` first")
    checkpoint = load_checkpoint(path, kind="vae")
    vae = build_vae(RunConfig.from_dict(checkpoint.config))
    checkpoint.restore(vae)
    vae.freeze()
    return vae


def load_trained_model(config: RunConfig, path: Path | str | None = None) -> VtonModel:
    """Restore a try-on model with the architecture recorded in its checkpoint.

    Raises:
        DependencyError: If no path is given and `train` has not saved a checkpoint
    """
    if path is None:
        path = RunPaths.of(config).vton_checkpoint
        if not path.exists():
            raise DependencyError(f"No try-on checkpoint at {path}; run `vestido train` first")
    path = Path(path)
    checkpoint = load_checkpoint(path, kind="vton")
    model = build_model(RunConfig.from_dict(checkpoint.config))
    checkpoint.restore(model)
    model.freeze()
    return model


def load_manifest(config: RunConfig) -> Manifest:
    return Manifest.load(config.data.path)


def split_indices(config: RunConfig, manifest: Manifest, split: str) -> list[int]:
    """Manifest indices of a named split.

    Raises:
        UsageError: If the split name is unknown
    """
    if split == "unseen":
        return manifest.unseen_indices
    if split not in SPLITS:
        raise UsageError(f"Unknown split '{split}' (expected one of {', '.join(SPLITS)})")
    return split_by_person(manifest, config.data.split, config.data.split_seed)[split]


def _require_samples(indices: Sequence[int], split: str, limit: int = 0) -> list[int]:
    if not indices:
        raise ValidationError(f"Split '{split}' has no samples")
    return list(indices[:limit]) if limit > 0 else list(indices)


def _guidance(config: RunConfig, **overrides: float) -> GuidanceWeights:
    values = config.guidance.to_dict()
    values.update(overrides)
    return GuidanceWeights(**values)


def _elapsed(start: float) -> str:
    return humanize.precisedelta(time.perf_counter() - start, minimum_unit="milliseconds")


def _steps_for(config: RunConfig, num_samples: int) -> int:
    training = config.training
    if training.epochs > 0:
        return training.epochs * math.ceil(num_samples / min(training.batch_size, num_samples))
    return training.steps


def training_batches(
    samples: Sequence[TripletSample], batch_size: int, seed: int, start_step: int = 0
) -> Iterator[tuple[int, TripletBatch]]:
    """Endless (step, batch) pairs, one reshuffled epoch after another.

    Epoch e is ordered by its own stream ``(seed, shuffle, e)``, so resuming
    at `start_step` skips into the middle of the same epoch a fresh run
    would be in. Steps count from ``start_step + 1``.
    """
    per_epoch = math.ceil(len(samples) / batch_size)
    epoch, skip = divmod(start_step, per_epoch)
    step = start_step
    while True:
        batches = iterate_batches(samples, batch_size, _stream(seed, _MODEL_SHUFFLE, epoch))
        for position, batch in enumerate(batches):
            if position < skip:
                continue
            step += 1
            yield step, batch
        epoch, skip = epoch + 1, 0


def _resume_state(
    path: Path, kind: str, module: Module, optimizer: Adam, rng: np.random.Generator
) -> tuple[int, np.random.Generator]:
    checkpoint = load_checkpoint(path, kind=kind)
    checkpoint.restore(module)
    if checkpoint.adam is not None:
        optimizer.state = checkpoint.adam
    restored = checkpoint.generator()
    logger.info("Resuming %s training from step %d", kind, checkpoint.step)
    return checkpoint.step, restored if restored is not None else rng


# --- gen-data ---


def cmd_gen_data(config: RunConfig, progress: bool = False) -> Manifest:
    """Render the configured dataset under ``data.path``."""
    data = config.data
    return generate_dataset(data.n, config.run.seed, data.path, data.n_unseen, progress)


# --- train-vae ---


def cmd_train_vae(config: RunConfig, resume: bool = False, progress: bool = False) -> Path:
    """Train the VAE on train-split person images.

    Writes ``vae.ckpt`` and the ``vae_loss.csv`` curve. With `resume`, training
    continues from the saved step, optimizer state and generator state.

    Raises:
        DatasetError: If the dataset is missing
        ValidationError: If the train split is empty
        NumericalError: If the loss diverges
    """
    paths = RunPaths.of(config)
    training = config.training
    manifest = load_manifest(config)
    indices = _require_samples(split_indices(config, manifest, "train"), "train")
    samples = load_samples(manifest, indices)
    images = np.stack([s.source.numpy() for s in samples] + [s.target.numpy() for s in samples])

    vae = build_vae(config)
    optimizer = Adam(
        vae.named_parameters(),
        lr=training.vae_lr,
        betas=(config.optimizer.beta1, config.optimizer.beta2),
        eps=config.optimizer.eps,
    )
    rng = _stream(config.run.seed, _VAE_TRAIN)
    step = 0
    if resume and paths.vae_checkpoint.exists():
        step, rng = _resume_state(paths.vae_checkpoint, "vae", vae, optimizer, rng)

    snapshot = config.to_dict()
    start = time.perf_counter()
    batch_size = min(training.vae_batch_size, len(images))
    with LossLog(paths.vae_loss, ["total", "reconstruction", "kl"], append=resume) as log:
        for step in tqdm(
            range(step + 1, training.vae_steps + 1), desc="train-vae", disable=not progress
        ):
            chosen = rng.choice(len(images), size=batch_size, replace=False)
            optimizer.zero_grad()
            loss = vae_loss(vae, Tensor(images[chosen]), rng, beta=training.vae_beta)
            loss.total.backward()
            optimizer.step()
            values = {"total": loss.total.item(), "reconstruction": loss.reconstruction, "kl": loss.kl}
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericalError(f"VAE loss diverged at step {step}: {values}")
            log.write(step, values)
            if step % config.run.log_every == 0:
                logger.info(
                    "vae step %d: reconstruction %.5f, kl %.4f (%s)",
                    step,
                    loss.reconstruction,
                    loss.kl,
                    _elapsed(start),
                )
            if training.checkpoint_every and step % training.checkpoint_every == 0:
                save_checkpoint(
                    paths.vae_checkpoint, "vae", vae, snapshot, step, optimizer.state, rng
                )

    vae.ready = True
    return save_checkpoint(
        paths.vae_checkpoint,
        "vae",
        vae,
        snapshot,
        optimizer.state.t,
        optimizer.state,
        rng,
        extra={"elapsed": time.perf_counter() - start},
    )


# --- train ---


def _validate(
    config: RunConfig, model: VtonModel, vae: VaeModel, samples: list[TripletSample], step: int
) -> float:
    """Sample a few validation triplets, save a grid and return their mean SSIM."""
    outputs = generate_outputs(config, model, vae, samples)
    scores = [ssim(to_unit_range(out), to_unit_range(s.target)) for out, s in zip(outputs, samples)]
    grid = comparison_grid(samples, [outputs])
    _save_png(grid, RunPaths.of(config).validation / f"step_{step:06d}.png")
    return float(np.mean(scores))


def cmd_train(config: RunConfig, resume: bool = False, progress: bool = False) -> Path:
    """Train the try-on model against the frozen VAE.

    Writes ``vton.ckpt`` and ``train_loss.csv``; every ``checkpoint_every``
    steps it also saves a resumable checkpoint and samples a validation grid.

    Raises:
        DependencyError: If the VAE checkpoint is missing
        DatasetError: If the dataset is missing
        ValidationError: If the train split is empty
        NumericalError: If the loss diverges
    """
    paths = RunPaths.of(config)
    training = config.training
    vae = load_frozen_vae(config)
    manifest = load_manifest(config)
    train = load_samples(
        manifest, _require_samples(split_indices(config, manifest, "train"), "train")
    )
    val = load_samples(manifest, split_indices(config, manifest, "val")[:4])

    sched = make_schedule(
        config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end
    )
    model = build_model(config)
    optimizer = Adam(
        model.trainable_parameters(),
        lr=config.optimizer.lr,
        betas=(config.optimizer.beta1, config.optimizer.beta2),
        eps=config.optimizer.eps,
    )
    logger.info(
        "Training %s parameters on %d triplets",
        humanize.intcomma(model.num_parameters()),
        len(train),
    )
    rng = _stream(config.run.seed, _MODEL_TRAIN)
    step = 0
    if resume and paths.vton_checkpoint.exists():
        step, rng = _resume_state(paths.vton_checkpoint, "vton", model, optimizer, rng)

    snapshot = config.to_dict()
    total = _steps_for(config, len(train))
    batch_size = min(training.batch_size, len(train))
    start = time.perf_counter()
    batches = training_batches(train, batch_size, config.run.seed, start_step=step)
    with LossLog(paths.train_loss, ["l_mse", "l_rec", "l_overall"], append=resume) as log:
        remaining = max(total - step, 0)
        for step, batch in tqdm(
            itertools.islice(batches, remaining),
            total=remaining,
            desc="train",
            disable=not progress,
        ):
            optimizer.zero_grad()
            loss = training_loss(
                batch, model, vae, sched, training.p_drop, training.lambda_rec, rng
            )
            loss.total.backward()
            optimizer.step()
            model.ready = True
            log.write(step, loss.as_dict())
            if step % config.run.log_every == 0:
                logger.info(
                    "step %d/%d: l_mse %.5f, l_rec %.5f, l_overall %.5f (%s)",
                    step,
                    total,
                    loss.l_mse,
                    loss.l_rec,
                    loss.l_overall,
                    _elapsed(start),
                )
            if training.checkpoint_every and step % training.checkpoint_every == 0:
                save_checkpoint(
                    paths.vton_checkpoint, "vton", model, snapshot, step, optimizer.state, rng
                )
                if val:
                    score = _validate(config, model, vae, val, step)
                    logger.info("step %d: validation SSIM %.4f", step, score)

    model.ready = True
    return save_checkpoint(
        paths.vton_checkpoint,
        "vton",
        model,
        snapshot,
        optimizer.state.t,
        optimizer.state,
        rng,
        extra={"elapsed": time.perf_counter() - start},
    )


# --- Sampling helpers ---


def generate_outputs(
    config: RunConfig,
    model: VtonModel,
    vae: VaeModel,
    samples: Sequence[TripletSample],
    weights: GuidanceWeights | None = None,
    bias_mode: str = "both",
    gray_mask: bool = False,
    progress: bool = False,
) -> np.ndarray:
    """Sample outputs for (source, target pose, garment) of each sample.

    Batch k starts at sample offset s and is seeded with ``run.seed + s``, so a
    sample's output does not depend on the other modes or weights being run.

    Returns:
        N×3×H×W array in [−1, 1]
    """
    weights = weights if weights is not None else _guidance(config)
    sched = make_schedule(
        config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end
    )
    batch_size = config.training.batch_size
    outputs = []
    for offset in tqdm(
        range(0, len(samples), batch_size), desc="sample", disable=not progress, leave=False
    ):
        chunk = list(samples[offset : offset + batch_size])
        batch = TripletBatch.from_samples(chunk)
        source = batch.source
        if gray_mask:
            source = gray_mask_torso(source, [s.source_pose for s in chunk])
        image = sample(
            model,
            vae,
            (source, batch.target_pose, batch.garment),
            weights,
            sched,
            steps=config.sampling.steps,
            seed=config.run.seed + offset,
            eta=config.sampling.eta,
            bias_mode=bias_mode,
        )
        outputs.append(image.numpy())
    return np.concatenate(outputs)


def pose_panel(pose: PoseSpec | Sequence[Sequence[float]], sigma: float = 1.5) -> Image.Image:
    """Max projection of the joint heatmaps as a grayscale RGB panel."""
    keypoints = pose.to_list() if isinstance(pose, PoseSpec) else pose
    projection = render_heatmaps(keypoints, PANEL, sigma).max(axis=0)
    pixels = np.round(np.clip(projection, 0.0, 1.0) * 255).astype(np.uint8)
    return Image.fromarray(pixels, mode="L").convert("RGB")


def comparison_grid(
    samples: Sequence[TripletSample | SampleInputs], outputs: Sequence[np.ndarray]
) -> Image.Image:
    """One row per sample: source | pose heatmap | garment | output per column set."""
    columns = 3 + len(outputs)
    grid = Image.new("RGB", (columns * PANEL, len(samples) * PANEL))
    for row, item in enumerate(samples):
        panels = [
            tensor_to_image(item.source),
            pose_panel(item.target_pose),
            tensor_to_image(item.garment),
            *(tensor_to_image(out[row]) for out in outputs),
        ]
        for col, panel in enumerate(panels):
            grid.paste(panel, (col * PANEL, row * PANEL))
    return grid


# --- sample ---

# An input slot is a manifest index or a file path; digit strings are indices.
InputRef = int | str | Path


@dataclass(frozen=True)
class SampleInputs:
    """The three conditions of one request, possibly from different sources."""

    source: Tensor
    target_pose: PoseSpec
    garment: Tensor
    label: str


def _as_index(ref: InputRef) -> int | None:
    if isinstance(ref, int):
        return ref
    if isinstance(ref, str) and ref.isdigit():
        return int(ref)
    return None


def _ref_label(ref: InputRef) -> str:
    index = _as_index(ref)
    return f"{index:05d}" if index is not None else Path(ref).stem


def resolve_inputs(
    manifest: Manifest,
    index: int = 0,
    source: InputRef | None = None,
    pose: InputRef | None = None,
    garment: InputRef | None = None,
) -> SampleInputs:
    """Collect (source, target pose, garment), each from an entry or a file.

    Unset slots come from entry `index`. Images are 64×64 PNGs; a pose file
    holds 13 ``[x, y, visible]`` triples or a pose file's ``target`` entry.

    Raises:
        IndexError: If an index is outside the dataset
        DatasetError: If a file is missing or unreadable
        ValidationError: If an image has the wrong size or a pose is malformed
    """
    refs = {
        "source": index if source is None else source,
        "pose": index if pose is None else pose,
        "garment": index if garment is None else garment,
    }
    entries: dict[int, TripletSample] = {}

    def entry(i: int) -> TripletSample:
        if i not in entries:
            entries[i] = load_samples(manifest, [i])[0]
        return entries[i]

    def image(role: str) -> Tensor:
        i = _as_index(refs[role])
        return getattr(entry(i), role) if i is not None else load_image_file(refs[role])

    pose_index = _as_index(refs["pose"])
    if pose_index is not None:
        target_pose = entry(pose_index).target_pose
    else:
        target_pose = load_pose_file(refs["pose"])
    labels = [_ref_label(ref) for ref in refs.values()]
    return SampleInputs(
        source=image("source"),
        target_pose=target_pose,
        garment=image("garment"),
        label=labels[0] if len(set(labels)) == 1 else "_".join(labels),
    )


def cmd_sample(
    config: RunConfig,
    checkpoint: Path | str | None = None,
    index: int = 0,
    weights: GuidanceWeights | None = None,
    out: Path | str | None = None,
    progress: bool = False,
    source: InputRef | None = None,
    pose: InputRef | None = None,
    garment: InputRef | None = None,
    seed: int | None = None,
) -> Path:
    """Sample one try-on image.

    The source image, target pose and garment default to dataset entry
    `index`; any of them can instead name another entry or a file (see
    `resolve_inputs`). `seed` overrides ``run.seed`` for this call only.

    Writes ``sample_<label>.png`` (the output) and ``grid_<label>.png`` (four
    64×64 panels) into `out` (default ``<run>/samples``). The label is the
    zero-padded index when all three inputs share one entry, otherwise the
    three input labels joined by ``_``.

    Raises:
        IntegrityError: If the checkpoint is corrupt
        IndexError: If an index is outside the dataset
    """
    model = load_trained_model(config, checkpoint)
    vae = load_frozen_vae(config)
    inputs = resolve_inputs(load_manifest(config), index, source, pose, garment)
    sched = make_schedule(
        config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end
    )
    image = sample(
        model,
        vae,
        (
            Tensor(inputs.source.numpy()[None]),
            [inputs.target_pose.to_list()],
            Tensor(inputs.garment.numpy()[None]),
        ),
        weights if weights is not None else _guidance(config),
        sched,
        steps=config.sampling.steps,
        seed=config.run.seed if seed is None else seed,
        eta=config.sampling.eta,
        progress=progress,
    )
    output = image.numpy()
    out_dir = Path(out) if out is not None else RunPaths.of(config).samples
    _save_png(comparison_grid([inputs], [output]), out_dir / f"grid_{inputs.label}.png")
    path = _save_png(tensor_to_image(output[0]), out_dir / f"sample_{inputs.label}.png")
    logger.info("Wrote %s", path)
    return path


# --- eval ---


def _training_features(
    config: RunConfig, manifest: Manifest
) -> FeatureExtractor:
    """Load the cached feature network of this run, or fit and cache one."""
    path = RunPaths.of(config).feature_checkpoint
    if path.exists():
        cached = load_checkpoint(path, kind="features")
        extractor = FeatureExtractor(
            np.random.default_rng(0), num_persons=int(cached.extra["num_persons"])
        )
        return cached.restore(extractor)  # type: ignore[return-value]
    train = load_samples(
        manifest, _require_samples(split_indices(config, manifest, "train"), "train")
    )
    extractor = fit_feature_extractor(
        np.stack([s.target.numpy() for s in train]),
        [PATTERNS.index(s.garment_spec.pattern) for s in train],
        [s.person_id for s in train],
        _stream(config.run.seed, _FEATURES),
        steps=config.metrics.feature_steps,
        batch_size=config.metrics.feature_batch_size,
    )
    save_checkpoint(
        path,
        "features",
        extractor,
        config.to_dict(),
        extra={"num_persons": extractor.num_persons},
    )
    return extractor


def evaluate_outputs(
    outputs: np.ndarray,
    samples: Sequence[TripletSample],
    split: str,
    extractor: FeatureExtractor | None = None,
) -> EvalReport:
    """Score outputs in [−1, 1] against each sample's ground truth."""
    if len(outputs) != len(samples):
        raise ValidationError(f"{len(outputs)} outputs for {len(samples)} samples")
    records = []
    for output, item in zip(outputs, samples):
        out = to_unit_range(output)
        truth = to_unit_range(item.target)
        records.append(
            SampleRecord(
                sample_id=item.index,
                ssim=ssim(out, truth),
                psnr=psnr(out, truth),
                torso_match=torso_color_match(out, item.garment_spec, item.target_pose),
            )
        )
    frechet = None
    if extractor is not None and len(samples) >= 2:
        truth = np.stack([s.target.numpy() for s in samples])
        frechet = frechet_distance(extractor.features(outputs), extractor.features(truth))
    return EvalReport(split=split, records=records, frechet=frechet)


def cmd_eval(
    config: RunConfig,
    checkpoint: Path | str | None = None,
    split: str = "test",
    progress: bool = False,
) -> Path:
    """Sample every item of `split` and write ``eval/<split>/report.{json,csv}``.

    Raises:
        ValidationError: If the split is empty
    """
    manifest = load_manifest(config)
    indices = _require_samples(
        split_indices(config, manifest, split), split, config.metrics.eval_limit
    )
    model = load_trained_model(config, checkpoint)
    vae = load_frozen_vae(config)
    samples = load_samples(manifest, indices)
    outputs = generate_outputs(config, model, vae, samples, progress=progress)
    report = evaluate_outputs(outputs, samples, split, _training_features(config, manifest))
    path = write_report(report, RunPaths.of(config).root / "eval" / split)
    aggregate = report.aggregate
    logger.info(
        "%s: SSIM %.4f, PSNR %.2f, torso match %.4f over %d samples",
        split,
        aggregate["ssim"],
        aggregate["psnr"],
        aggregate["torso_match"],
        aggregate["count"],
    )
    return path


# --- ablate / probe ---


def paired_comparison(candidate: Sequence[float], baseline: Sequence[float]) -> dict[str, Any]:
    """Sign test that `candidate` scores lower (better) than `baseline` pairwise.

    With no pairs the means are None and the p-value is 1.
    """
    diffs = np.asarray(candidate, dtype=np.float64) - np.asarray(baseline, dtype=np.float64)
    wins = int((diffs < 0).sum())
    losses = int((diffs > 0).sum())
    return {
        "pairs": len(diffs),
        "wins": wins,
        "losses": losses,
        "ties": int(len(diffs) - wins - losses),
        "p_value": sign_test(wins, losses),
        "candidate_mean": float(np.mean(candidate)) if len(diffs) else None,
        "baseline_mean": float(np.mean(baseline)) if len(diffs) else None,
    }


def _probe_samples(config: RunConfig, manifest: Manifest) -> tuple[str, list[TripletSample]]:
    split = "unseen" if manifest.unseen_indices else "test"
    indices = _require_samples(
        split_indices(config, manifest, split), split, config.metrics.probe_samples
    )
    return split, load_samples(manifest, indices)


def _torso_scores(outputs: np.ndarray, samples: Sequence[TripletSample]) -> list[float]:
    return [
        torso_color_match(to_unit_range(out), s.garment_spec, s.target_pose)
        for out, s in zip(outputs, samples)
    ]


def cmd_ablate(
    config: RunConfig,
    checkpoint: Path | str | None = None,
    modes: Sequence[str] = ABLATION_MODES,
    progress: bool = False,
) -> Path:
    """Sample the probe set under each ablation mode with identical seeds.

    Modes are the bias variants of the appearance encoder plus ``gray-mask``,
    which grays out the source torso before encoding. Writes per-mode metrics,
    sign tests of every mode against ``both`` over all samples and over the
    striped garments only, a sign test of ``garment-only`` against
    ``app-only`` and one comparison grid.

    Raises:
        UsageError: On an unknown mode
    """
    unknown = [m for m in modes if m not in ABLATION_MODES]
    if unknown:
        raise UsageError(
            f"Unknown ablation mode(s) {', '.join(unknown)} "
            f"(expected {', '.join(ABLATION_MODES)})"
        )
    modes = list(dict.fromkeys(modes))
    model = load_trained_model(config, checkpoint)
    vae = load_frozen_vae(config)
    split, samples = _probe_samples(config, load_manifest(config))
    run_modes = modes if "both" in modes else ["both", *modes]

    outputs: dict[str, np.ndarray] = {}
    for mode in run_modes:
        logger.info("Ablation mode %s on %d %s samples", mode, len(samples), split)
        outputs[mode] = generate_outputs(
            config,
            model,
            vae,
            samples,
            bias_mode="both" if mode == "gray-mask" else mode,
            gray_mask=mode == "gray-mask",
            progress=progress,
        )

    scores = {mode: _torso_scores(out, samples) for mode, out in outputs.items()}
    striped = [i for i, s in enumerate(samples) if s.garment_spec.pattern == "stripes"]
    results: dict[str, Any] = {"split": split, "count": len(samples), "modes": {}}
    for mode in modes:
        report = evaluate_outputs(outputs[mode], samples, split)
        entry = dict(report.aggregate)
        if mode != "both":
            entry["vs_both"] = paired_comparison(scores[mode], scores["both"])
            entry["vs_both_striped"] = paired_comparison(
                [scores[mode][i] for i in striped], [scores["both"][i] for i in striped]
            )
        results["modes"][mode] = entry
    if "garment-only" in modes and "app-only" in modes:
        results["garment_only_vs_app_only"] = paired_comparison(
            scores["garment-only"], scores["app-only"]
        )
    out_dir = RunPaths.of(config).root / "ablate"
    _save_png(comparison_grid(samples[:8], [outputs[m][:8] for m in modes]), out_dir / "grid.png")
    return _write_json(out_dir / "report.json", results)


def cmd_probe(
    config: RunConfig, checkpoint: Path | str | None = None, progress: bool = False
) -> Path:
    """Compare garment guidance against ``w_garment = 0`` on unseen garments."""
    model = load_trained_model(config, checkpoint)
    vae = load_frozen_vae(config)
    split, samples = _probe_samples(config, load_manifest(config))
    guided = generate_outputs(config, model, vae, samples, progress=progress)
    baseline = generate_outputs(
        config, model, vae, samples, _guidance(config, w_garment=0.0), progress=progress
    )
    comparison = paired_comparison(_torso_scores(guided, samples), _torso_scores(baseline, samples))
    logger.info(
        "Probe on %d %s samples: torso match %.4f guided vs %.4f without garment (p=%.3g)",
        len(samples),
        split,
        comparison["candidate_mean"],
        comparison["baseline_mean"],
        comparison["p_value"],
    )
    out_dir = RunPaths.of(config).root / "probe"
    _save_png(comparison_grid(samples[:8], [guided[:8], baseline[:8]]), out_dir / "grid.png")
    return _write_json(
        out_dir / "report.json", {"split": split, "count": len(samples), **comparison}
    )
