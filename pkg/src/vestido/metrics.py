"""Evaluation metrics and report emission.

Image metrics take arrays or tensors with values in [0, 1]; use
`to_unit_range` on model outputs, which live in [−1, 1].
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import linalg, ndimage, stats

from vestido import tensor as T
from vestido.errors import DatasetError, DimensionError, NumericalError, ValidationError
from vestido.nn import Conv2d, Linear, Module
from vestido.optim import Adam
from vestido.synth import PATTERNS, GarmentSpec, PoseSpec, pattern_raster, torso_mask
from vestido.tensor import Tensor

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0
FRECHET_EPS = 1e-6
FEATURE_DIM = 64


def _array(x: Tensor | np.ndarray) -> np.ndarray:
    return x.numpy().astype(np.float64) if isinstance(x, Tensor) else np.asarray(x, np.float64)


def to_unit_range(image: Tensor | np.ndarray) -> np.ndarray:
    """Map [−1, 1] values to [0, 1]."""
    return (_array(image) + 1.0) / 2.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-d Gaussian taps; the 2-d window is their outer product."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _local_mean(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(x, taps, axis=-1, mode="wrap")
    return ndimage.correlate1d(out, taps, axis=-2, mode="wrap")


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM with a circular Gaussian window (dynamic range 1)."""
    taps = gaussian_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _local_mean(a, taps), _local_mean(b, taps)
    var_a = _local_mean(a * a, taps) - mu_a**2
    var_b = _local_mean(b * b, taps) - mu_b**2
    cov = _local_mean(a * b, taps) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return numerator / denominator


def ssim(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """Mean local SSIM over channels and positions.

    Accepts H×W or C×H×W images in [0, 1]. Statistics wrap around the image
    borders, so shifting both images identically leaves the score unchanged.

    Raises:
        DimensionError: If the shapes differ
    """
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise DimensionError(f"SSIM needs equal shapes, got {x.shape} and {y.shape}")
    if x.ndim not in (2, 3):
        raise DimensionError(f"SSIM expects H×W or C×H×W images, got {x.shape}")
    return float(ssim_map(x, y).mean())


def psnr(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """10·log10(1 / MSE) for [0, 1] images, capped at 99 dB.

    Raises:
        DimensionError: If the shapes differ
    """
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise DimensionError(f"PSNR needs equal shapes, got {x.shape} and {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(feats_a: Tensor | np.ndarray, feats_b: Tensor | np.ndarray) -> float:
    """‖µ_a − µ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^½) between two feature sets.

    Covariances get +1e-6·I. The trace of the matrix root is taken from the
    eigenvalues of the symmetric product Σ_a^½ Σ_b Σ_a^½.

    Raises:
        DimensionError: If the feature widths differ or a set has fewer than 2 rows
        NumericalError: If the covariance product is not positive semi-definite
    """
    a, b = _array(feats_a), _array(feats_b)
    a = a.reshape(-1, 1) if a.ndim == 1 else a
    b = b.reshape(-1, 1) if b.ndim == 1 else b
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"Feature sets must be n×d with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise DimensionError("Fréchet distance needs at least two samples per set")

    dim = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim) + FRECHET_EPS * np.eye(dim)
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim) + FRECHET_EPS * np.eye(dim)
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise NumericalError("Non-finite feature covariance")

    root_a = _psd_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    eigenvalues = linalg.eigvalsh((product + product.T) / 2.0)
    scale = max(1.0, float(np.abs(eigenvalues).max()))
    if eigenvalues.min() < -1e-6 * scale:
        raise NumericalError(
            f"Covariance product has a negative eigenvalue ({eigenvalues.min():.3e})"
        )
    trace_root = float(np.sqrt(np.clip(eigenvalues, 0.0, None)).sum())
    diff = mu_a - mu_b
    distance = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)
    return max(distance, 0.0)


def torso_color_match(
    output: Tensor | np.ndarray, garment: GarmentSpec, pose: PoseSpec
) -> float:
    """Mean per-channel gap between the output's torso color and the garment's.

    Both means are taken over the same torso quad. The reference color is the
    mean of the garment's pattern raster over that quad, not its base color:
    a striped or checked garment is compared against the coverage-weighted
    blend of its two colors, and a solid garment against its base color.

    Args:
        output: 3×H×W image in [0, 1]

    Raises:
        ValidationError: If the torso quad is degenerate
    """
    image = _array(output)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"Expected a 3×H×W image, got {image.shape}")
    mask = torso_mask(pose, image.shape[-1])
    observed = image[:, mask].mean(axis=1)
    reference = pattern_raster(garment, image.shape[-1])[mask].mean(axis=0) / 255.0
    return float(np.abs(observed - reference).mean())


def sign_test(wins: int, losses: int) -> float:
    """One-sided p-value that wins outnumber losses (ties excluded)."""
    trials = wins + losses
    if trials == 0:
        return 1.0
    return float(stats.binomtest(wins, trials, 0.5, alternative="greater").pvalue)


# --- Feature extractor ---


class FeatureExtractor(Module):
    """Small conv classifier whose penultimate activations serve as features.

    Args:
        rng: Initialization generator
        num_persons: Size of the person-identity head
        width: Channels of the first conv stage
    """

    def __init__(self, rng: np.random.Generator, num_persons: int = 1, width: int = 16) -> None:
        self.num_persons = max(1, num_persons)
        self.conv1 = Conv2d(3, width, 3, rng, stride=2, pad=1)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, stride=2, pad=1)
        self.conv3 = Conv2d(2 * width, FEATURE_DIM, 3, rng, stride=2, pad=1)
        self.pattern_head = Linear(FEATURE_DIM, len(PATTERNS), rng)
        self.person_head = Linear(FEATURE_DIM, self.num_persons, rng)

    def forward(self, images: Tensor) -> Tensor:
        """B×3×H×W in [−1, 1] → B×64 features."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"Expected B×3×H×W images, got {images.shape}")
        h = T.silu(self.conv1(images))
        h = T.silu(self.conv2(h))
        h = T.silu(self.conv3(h))
        return h.mean(axis=(2, 3))

    def features(self, images: Tensor | np.ndarray, batch_size: int = 64) -> np.ndarray:
        data = images if isinstance(images, Tensor) else Tensor(images)
        with T.no_grad():
            chunks = [
                self(data[i : i + batch_size]).numpy()
                for i in range(0, data.shape[0], batch_size)
            ]
        return np.concatenate(chunks).astype(np.float64)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    picked = logits[np.arange(len(labels)), labels]
    return (T.logsumexp(logits, axis=-1) - picked).mean()


def fit_feature_extractor(
    images: np.ndarray,
    pattern_labels: Sequence[int],
    person_labels: Sequence[int],
    rng: np.random.Generator,
    steps: int = 200,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> FeatureExtractor:
    """Train a `FeatureExtractor` on pattern and identity labels.

    Args:
        images: N×3×H×W array in [−1, 1]
        pattern_labels: Index into `PATTERNS` per image
        person_labels: Person identity per image
    """
    if len(images) == 0:
        raise ValidationError("Feature extractor needs at least one training image")
    patterns = np.asarray(pattern_labels, dtype=np.int64)
    persons = np.asarray(person_labels, dtype=np.int64)
    model = FeatureExtractor(rng, num_persons=int(persons.max()) + 1)
    optimizer = Adam(model.named_parameters(), lr=lr)
    loss_value = float("nan")
    for step in range(steps):
        batch = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        optimizer.zero_grad()
        feats = model(Tensor(images[batch]))
        loss = cross_entropy(model.pattern_head(feats), patterns[batch]) + cross_entropy(
            model.person_head(feats), persons[batch]
        )
        loss.backward()
        optimizer.step()
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise NumericalError(f"Feature extractor loss diverged at step {step}")
    logger.debug("Feature extractor trained for %d steps, final loss %.4f", steps, loss_value)
    model.ready = True
    return model


# --- Reports ---


@dataclass
class SampleRecord:
    sample_id: int
    ssim: float
    psnr: float
    torso_match: float


@dataclass
class EvalReport:
    """Per-sample records plus aggregates (means and the Fréchet distance)."""

    split: str
    records: list[SampleRecord] = field(default_factory=list)
    frechet: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, Any]:
        if not self.records:
            return {"count": 0, "frechet": self.frechet}
        return {
            "count": len(self.records),
            "ssim": float(np.mean([r.ssim for r in self.records])),
            "psnr": float(np.mean([r.psnr for r in self.records])),
            "torso_match": float(np.mean([r.torso_match for r in self.records])),
            "frechet": self.frechet,
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "aggregate": self.aggregate,
            "samples": [asdict(r) for r in self.records],
            **self.extra,
        }


def write_report(report: EvalReport, out_dir: Path | str, stem: str = "report") -> Path:
    """Write `<stem>.json` and `<stem>.csv` (one row per sample plus an aggregate row)."""
    out = Path(out_dir)
    json_path = out / f"{stem}.json"
    csv_path = out / f"{stem}.csv"
    try:
        out.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        with csv_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["sample_id", "ssim", "psnr", "torso_match", "frechet"])
            for r in report.records:
                writer.writerow([r.sample_id, r.ssim, r.psnr, r.torso_match, ""])
            agg = report.aggregate
            writer.writerow(
                [
                    "aggregate",
                    agg.get("ssim", ""),
                    agg.get("psnr", ""),
                    agg.get("torso_match", ""),
                    "" if agg["frechet"] is None else agg["frechet"],
                ]
            )
    except OSError as e:
        logger.error("Cannot write report to %s: %s", out, e)
        raise DatasetError(f"Cannot write report to {out}: {e}") from e
    return json_path
