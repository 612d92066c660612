"""Run configuration with TOML persistence and named presets.

A configuration is a preset (``desk`` by default) with the values of an
optional TOML file layered on top. Every section is a dataclass; unknown
sections or keys and out-of-range values raise `ConfigurationError`.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

from vestido.errors import ConfigurationError, DatasetError

if sys.version_info >= (3, 11):
    import tomllib
    from typing import Self
else:
    import tomli as tomllib
    from typing_extensions import Self

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1.0"
DEFAULT_PRESET = "desk"

# Default config template with comments (written by `vestido config init`)
DEFAULT_CONFIG_TEMPLATE = """\
# vestido configuration
# Values here are layered on top of the preset named below.
# Presets: desk (default), paper, smoke, overfit

preset = "desk"

[run]
# Global seed; every command is reproducible under it
seed = 0
# Output directory for checkpoints, samples and reports
out = "runs/default"
# BLAS threads; values above 1 void bit-exact reproducibility
threads = 1
# Log a training line every N steps
log_every = 50

[data]
# Dataset directory written by `vestido gen-data`
path = "data/synth"
# Number of three-paired triplets
n = 2000
# Extra probe entries whose garments come from a held-out palette
n_unseen = 64
# Train / val / test fractions (split by person identity)
split = [0.8, 0.1, 0.1]
split_seed = 0

[model]
image_size = 64
vae_channels = 32
latent_channels = 4
# Channel width per scale for source, pose and UNet features
widths = [64, 128, 256]
# Width of the fourth, coarsest garment scale
garment_extra_width = 512
encoder_depth = 1
encoder_heads = 4
token_dim = 256
num_tokens = 16
decoder_layers = 2
decoder_heads = 4
appearance_layers = 1
appearance_heads = 4
# Heads of the bias-augmented query attention at every UNet scale; must divide
# every width (per-head width sets the √d scaling)
attention_heads = 4
time_dim = 64
time_embed_dim = 256
# Keypoint heatmap Gaussian width in pixels
pose_sigma = 1.5

[schedule]
num_steps = 1000
beta_start = 0.0001
beta_end = 0.02

[optimizer]
lr = 0.0001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[training]
# Diffusion optimizer steps (ignored when epochs > 0)
steps = 5000
epochs = 0
batch_size = 16
# Independent drop probability of each condition
p_drop = 0.2
# Weight of the source self-reconstruction loss
lambda_rec = 1.0
vae_steps = 2000
vae_batch_size = 16
vae_lr = 0.001
vae_beta = 0.0001
# Save a resumable checkpoint every N steps (0 disables)
checkpoint_every = 500

[guidance]
w_pose = 2.0
w_app = 2.0
w_garment = 2.0
# Optional fifth branch with appearance and garment jointly present
w_joint = 0.0
joint_branch = false

[sampling]
steps = 50
eta = 0.0

[metrics]
# Training steps of the feature network behind the Fréchet distance
feature_steps = 300
feature_batch_size = 32
# Evaluate at most N samples per split (0 = all)
eval_limit = 0
# Samples per ablation / probe comparison
probe_samples = 50
"""


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    """Check `value` against the type of the field default."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigurationError(f"{where} must be finite, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{where} must be a non-empty list, got {value!r}")
        return [_coerce(section, key, v, default[0]) for v in value]
    return value


class _Section:
    """Shared TOML round-trip for configuration sections."""

    NAME = ""

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for TOML serialization."""
        return {f.name: getattr(self, f.name) for f in fields(self)}  # type: ignore[arg-type]

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Self | None = None) -> Self:
        """Create from dictionary, layering `data` over `base` (or the defaults).

        Raises:
            ConfigurationError: On unknown keys, wrong types or invalid values
        """
        base = base if base is not None else cls()
        if not isinstance(data, dict):
            raise ConfigurationError(f"[{cls.NAME}] must be a table")
        known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown key(s) in [{cls.NAME}]: {', '.join(unknown)}")
        values = base.to_dict()
        for key, value in data.items():
            values[key] = _coerce(cls.NAME, key, value, values[key])
        return cls(**values)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


@dataclass
class RunSection(_Section):
    """Process-wide settings.

    Attributes:
        seed: Global seed
        out: Output directory
        threads: BLAS thread count
        log_every: Training log interval in steps
    """

    NAME = "run"

    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    log_every: int = 50

    def __post_init__(self) -> None:
        _require(self.seed >= 0, "run.seed must be non-negative")
        _require(self.threads >= 1, "run.threads must be at least 1")
        _require(self.log_every >= 1, "run.log_every must be at least 1")


@dataclass
class DataSection(_Section):
    NAME = "data"

    path: str = "data/synth"
    n: int = 2000
    n_unseen: int = 64
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0

    def __post_init__(self) -> None:
        _require(self.n >= 1, "data.n must be at least 1")
        _require(self.n_unseen >= 0, "data.n_unseen must be non-negative")
        _require(
            len(self.split) == 3
            and all(f >= 0 for f in self.split)
            and abs(sum(self.split) - 1.0) < 1e-6,
            f"data.split must be three non-negative fractions summing to 1, got {self.split}",
        )


@dataclass
class ModelSection(_Section):
    """Network sizes.

    Attributes:
        image_size: Pixel extent of every image
        vae_channels: VAE width at full resolution
        latent_channels: Latent map channels
        widths: Width ladder of source, pose and UNet features
        garment_extra_width: Width of the coarsest garment scale
        encoder_depth: Transformer layers per pyramid stage
        encoder_heads: Pyramid attention heads
        token_dim: Garment token width
        num_tokens: Garment token count
        decoder_layers: Garment token decoder depth
        decoder_heads: Garment token decoder heads
        appearance_layers: Transformer layers in the appearance encoder
        appearance_heads: Appearance encoder heads
        attention_heads: Heads of the bias-augmented query attention
        time_dim: Sinusoidal timestep embedding width
        time_embed_dim: Time MLP width
        pose_sigma: Heatmap Gaussian width
    """

    NAME = "model"

    image_size: int = 64
    vae_channels: int = 32
    latent_channels: int = 4
    widths: list[int] = field(default_factory=lambda: [64, 128, 256])
    garment_extra_width: int = 512
    encoder_depth: int = 1
    encoder_heads: int = 4
    token_dim: int = 256
    num_tokens: int = 16
    decoder_layers: int = 2
    decoder_heads: int = 4
    appearance_layers: int = 1
    appearance_heads: int = 4
    attention_heads: int = 4
    time_dim: int = 64
    time_embed_dim: int = 256
    pose_sigma: float = 1.5

    def __post_init__(self) -> None:
        _require(self.image_size == 64, "model.image_size must be 64 (sprite canvas size)")
        _require(all(w > 0 for w in self.widths), "model.widths must be positive")
        for heads, name in (
            (self.encoder_heads, "encoder_heads"),
            (self.appearance_heads, "appearance_heads"),
            (self.attention_heads, "attention_heads"),
        ):
            _require(
                heads >= 1 and all(w % heads == 0 for w in self.widths),
                f"model.{name} must divide every width in {self.widths}",
            )
        _require(
            self.garment_extra_width % self.encoder_heads == 0,
            "model.encoder_heads must divide model.garment_extra_width",
        )
        _require(
            self.decoder_heads >= 1 and self.token_dim % self.decoder_heads == 0,
            "model.decoder_heads must divide model.token_dim",
        )
        _require(self.time_dim > 0 and self.time_dim % 2 == 0, "model.time_dim must be even")
        _require(self.pose_sigma > 0, "model.pose_sigma must be positive")
        for name in ("vae_channels", "latent_channels", "num_tokens", "encoder_depth",
                     "decoder_layers", "appearance_layers", "time_embed_dim"):  # fmt: skip
            _require(getattr(self, name) >= 1, f"model.{name} must be at least 1")


@dataclass
class ScheduleSection(_Section):
    NAME = "schedule"

    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        _require(self.num_steps >= 2, "schedule.num_steps must be at least 2")
        _require(
            0.0 < self.beta_start <= self.beta_end < 1.0,
            "schedule needs 0 < beta_start <= beta_end < 1",
        )


@dataclass
class OptimizerSection(_Section):
    NAME = "optimizer"

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        _require(self.lr > 0, "optimizer.lr must be positive")
        _require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "optimizer betas must lie in [0, 1)")
        _require(self.eps > 0, "optimizer.eps must be positive")


@dataclass
class TrainingSection(_Section):
    NAME = "training"

    steps: int = 5000
    epochs: int = 0
    batch_size: int = 16
    p_drop: float = 0.2
    lambda_rec: float = 1.0
    vae_steps: int = 2000
    vae_batch_size: int = 16
    vae_lr: float = 1e-3
    vae_beta: float = 1e-4
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        _require(self.steps >= 1 or self.epochs >= 1, "training needs steps or epochs")
        _require(self.steps >= 0 and self.epochs >= 0, "training.steps/epochs must be non-negative")
        _require(self.batch_size >= 1, "training.batch_size must be at least 1")
        _require(self.vae_batch_size >= 1, "training.vae_batch_size must be at least 1")
        _require(0.0 <= self.p_drop <= 1.0, "training.p_drop must lie in [0, 1]")
        _require(self.lambda_rec >= 0, "training.lambda_rec must be non-negative")
        _require(self.vae_steps >= 0, "training.vae_steps must be non-negative")
        _require(self.vae_lr > 0, "training.vae_lr must be positive")
        _require(self.vae_beta >= 0, "training.vae_beta must be non-negative")
        _require(self.checkpoint_every >= 0, "training.checkpoint_every must be non-negative")


@dataclass
class GuidanceSection(_Section):
    NAME = "guidance"

    w_pose: float = 2.0
    w_app: float = 2.0
    w_garment: float = 2.0
    w_joint: float = 0.0
    joint_branch: bool = False


@dataclass
class SamplingSection(_Section):
    NAME = "sampling"

    steps: int = 50
    eta: float = 0.0

    def __post_init__(self) -> None:
        _require(self.steps >= 1, "sampling.steps must be at least 1")
        _require(self.eta >= 0, "sampling.eta must be non-negative")


@dataclass
class MetricsSection(_Section):
    NAME = "metrics"

    feature_steps: int = 300
    feature_batch_size: int = 32
    eval_limit: int = 0
    probe_samples: int = 50

    def __post_init__(self) -> None:
        _require(self.feature_steps >= 0, "metrics.feature_steps must be non-negative")
        _require(self.feature_batch_size >= 1, "metrics.feature_batch_size must be at least 1")
        _require(self.eval_limit >= 0, "metrics.eval_limit must be non-negative")
        _require(self.probe_samples >= 1, "metrics.probe_samples must be at least 1")


SECTIONS: dict[str, type[_Section]] = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "schedule": ScheduleSection,
    "optimizer": OptimizerSection,
    "training": TrainingSection,
    "guidance": GuidanceSection,
    "sampling": SamplingSection,
    "metrics": MetricsSection,
}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {},
    "paper": {
        "data": {"n": 6014},
        "training": {"epochs": 30, "batch_size": 24, "p_drop": 0.2, "lambda_rec": 1.0},
        "sampling": {"steps": 50},
    },
    "smoke": {
        "data": {"n": 16, "n_unseen": 4},
        "model": {
            "vae_channels": 8,
            "widths": [16, 32, 64],
            "garment_extra_width": 128,
            "encoder_heads": 2,
            "token_dim": 32,
            "num_tokens": 4,
            "decoder_layers": 1,
            "decoder_heads": 2,
            "appearance_heads": 2,
            "time_dim": 16,
            "time_embed_dim": 32,
        },
        "schedule": {"num_steps": 100},
        "training": {"steps": 2, "batch_size": 4, "vae_steps": 20, "vae_batch_size": 4, "checkpoint_every": 0},
        "sampling": {"steps": 5},
        "metrics": {"feature_steps": 5, "feature_batch_size": 8, "probe_samples": 4},
        "run": {"log_every": 1},
    },
    "overfit": {
        "data": {"n": 8, "n_unseen": 0, "split": [1.0, 0.0, 0.0]},
        "model": {
            "vae_channels": 16,
            "widths": [32, 64, 128],
            "garment_extra_width": 256,
            "token_dim": 128,
            "time_embed_dim": 128,
        },
        "optimizer": {"lr": 1e-3},
        "training": {"steps": 500, "batch_size": 8, "p_drop": 0.0, "vae_steps": 2000, "vae_batch_size": 8},
        "guidance": {"w_pose": 1.0, "w_app": 0.0, "w_garment": 0.0, "w_joint": 1.0, "joint_branch": True},
        "metrics": {"probe_samples": 8},
    },
}


@dataclass
class RunConfig:
    """Root configuration container.

    Attributes:
        preset: Name of the preset the values were layered on
    """

    preset: str = DEFAULT_PRESET
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict[str, Any]:
        """Convert to dictionary for TOML serialization."""
        return {
            "version": CONFIG_VERSION,
            "preset": self.preset,
            **{name: getattr(self, name).to_dict() for name in SECTIONS},
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any], preset: str | None = None) -> Self:
        """Layer `data` over a preset.

        The preset is `preset` if given, else `data["preset"]`, else ``desk``.

        Raises:
            ConfigurationError: On unknown presets, sections or keys, or invalid values
        """
        name = preset or data.get("preset", DEFAULT_PRESET)
        if name not in PRESETS:
            raise ConfigurationError(
                f"Unknown preset '{name}' (expected one of {', '.join(PRESETS)})"
            )
        unknown = sorted(set(data) - set(SECTIONS) - {"version", "preset"})
        if unknown:
            raise ConfigurationError(f"Unknown config section(s): {', '.join(unknown)}")
        overrides = PRESETS[name]
        sections = {}
        for section, section_cls in SECTIONS.items():
            base = section_cls.from_dict(overrides.get(section, {}))
            sections[section] = section_cls.from_dict(data.get(section, {}), base)
        return cls(preset=name, **sections)

    @classmethod
    def from_preset(cls, name: str = DEFAULT_PRESET) -> Self:
        return cls.from_dict({}, preset=name)


def load_config(path: Path | str | None = None, preset: str | None = None) -> RunConfig:
    """Read a TOML config file (optional) and layer it on its preset.

    Raises:
        DatasetError: If the file cannot be read
        ConfigurationError: If the file is not valid TOML or fails validation
    """
    if path is None:
        return RunConfig.from_preset(preset or DEFAULT_PRESET)
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"Config file not found: {path}") from e
    except OSError as e:
        logger.error("Cannot read config file %s: %s", path, e)
        raise DatasetError(f"Cannot read config file {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Invalid TOML in {path}: {e}") from e
    return RunConfig.from_dict(data, preset)


def write_default_config(path: Path | str, overwrite: bool = False) -> Path:
    """Write the commented default template.

    Raises:
        ConfigurationError: If the file exists and `overwrite` is False
        DatasetError: If the file cannot be written
    """
    path = Path(path)
    if path.exists() and not overwrite:
        raise ConfigurationError(f"Refusing to overwrite existing config {path}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(DEFAULT_CONFIG_TEMPLATE, encoding="utf-8")
    except OSError as e:
        logger.error("Cannot write config file %s: %s", path, e)
        raise DatasetError(f"Cannot write config file {path}: {e}") from e
    return path
