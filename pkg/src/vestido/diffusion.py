"""Diffusion mathematics: schedule, forward noising, losses, guidance, DDIM.

Timesteps are 1-based: t ∈ {1, …, T} index the β table, and ᾱ_0 = 1 denotes
clean latents, which the last DDIM step lands on.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
from tqdm import tqdm

from vestido import tensor as T
from vestido.encoders import VaeModel, vae_encode
from vestido.errors import (
    ConfigurationError,
    ModelNotReadyError,
    NumericalError,
    ValidationError,
)
from vestido.tensor import Tensor

if TYPE_CHECKING:
    from vestido.dataset import TripletBatch
    from vestido.unet import ConditionSet

logger = logging.getLogger(__name__)


class DenoisingModel(Protocol):
    """What training and sampling need from a model."""

    ready: bool

    def encode_conditions(
        self, source: Tensor, pose: Any, garment: Tensor, bias_mode: str = "both"
    ) -> ConditionSet: ...

    def __call__(self, z_t: Tensor, t: Any, cond: ConditionSet) -> Tensor: ...


# --- Schedule ---


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Linear β schedule with cumulative products.

    Attributes:
        num_steps: T
        betas: β_1 … β_T (index 0 holds β_1)
        alphas: 1 − β_t
        alpha_bar: ᾱ_0 … ᾱ_T with ᾱ_0 = 1
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def check_timesteps(self, t: Any, allow_zero: bool = False) -> np.ndarray:
        steps = np.asarray(t, dtype=np.int64)
        low = 0 if allow_zero else 1
        if np.any(steps < low) or np.any(steps > self.num_steps):
            raise ValidationError(
                f"Timesteps must lie in [{low}, {self.num_steps}], got {np.asarray(t).tolist()}"
            )
        return steps


def make_schedule(
    num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear ramp β_1 = beta_start … β_T = beta_end.

    Raises:
        ConfigurationError: Unless 0 < beta_start ≤ beta_end < 1 and T ≥ 2
    """
    if num_steps < 2:
        raise ConfigurationError(f"Schedule needs at least 2 steps, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            f"Need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(num_steps, betas, alphas, alpha_bar)


def _per_sample(values: np.ndarray, like: Tensor) -> Tensor | float:
    """Scalars stay scalars; per-sample values become (B, 1, …) constants."""
    if values.ndim == 0:
        return float(values)
    shape = (values.shape[0],) + (1,) * (like.ndim - 1)
    return Tensor(values.reshape(shape).astype(like.dtype))


def forward_diffuse(
    z0: Tensor, t: int | Sequence[int] | np.ndarray, eps: Tensor, sched: NoiseSchedule
) -> Tensor:
    """z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps, for one t or one t per sample.

    Raises:
        ValidationError: If t lies outside [1, T] or eps does not match z0
    """
    if eps.shape != z0.shape:
        raise ValidationError(f"Noise shape {eps.shape} differs from latent shape {z0.shape}")
    steps = sched.check_timesteps(t)
    abar = sched.alpha_bar[steps]
    return z0 * _per_sample(np.sqrt(abar), z0) + eps * _per_sample(np.sqrt(1.0 - abar), z0)


# --- Condition dropout ---


def drop_conditions(cond: ConditionSet, p: float, rng: np.random.Generator) -> ConditionSet:
    """Flag appearance, pose and garment dropped independently with probability p.

    Flags are drawn per sample; the returned set replaces all three.

    Raises:
        ConfigurationError: If p lies outside [0, 1]
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"Drop probability must lie in [0, 1], got {p}")
    draws = rng.random((3, cond.batch_size)) < p
    return cond.with_drops(app=draws[0], pose=draws[1], garment=draws[2])


# --- Training objective ---


@dataclass
class LossBreakdown:
    """Denoising losses for one batch.

    Attributes:
        total: Differentiable l_overall
        l_mse: Target-image denoising loss
        l_rec: Source self-reconstruction loss
        l_overall: l_mse + lambda_rec · l_rec
        lambda_rec: Weight of the reconstruction term
    """

    total: Tensor
    l_mse: float
    l_rec: float
    l_overall: float
    lambda_rec: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {"l_mse": self.l_mse, "l_rec": self.l_rec, "l_overall": self.l_overall}


def _denoising_term(
    model: DenoisingModel,
    z0: Tensor,
    cond: ConditionSet,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> Tensor:
    batch = z0.shape[0]
    t = rng.integers(1, sched.num_steps + 1, size=batch)
    eps = T.randn(z0.shape, rng)
    z_t = forward_diffuse(z0, t, eps, sched)
    return T.mse_loss(model(z_t, t, cond), eps)


def training_loss(
    batch: TripletBatch,
    model: DenoisingModel,
    vae: VaeModel,
    sched: NoiseSchedule,
    p_drop: float,
    lambda_rec: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    """l_overall = l_mse + lambda_rec · l_rec.

    l_mse denoises the target image under (source, target pose, garment);
    l_rec denoises the source image under (source, source pose, garment).
    Latents come from the frozen VAE's posterior mean. Each term draws its
    own timesteps, noise and condition drops.

    Raises:
        ValidationError: If the batch lacks ground-truth target images
        NumericalError: If a loss term is not finite
    """
    if batch.target is None:
        raise ValidationError("Training batch has no ground-truth target images")
    if lambda_rec < 0:
        raise ConfigurationError(f"lambda_rec must be non-negative, got {lambda_rec}")

    with T.no_grad():
        z_target = vae_encode(vae, batch.target)
        z_source = vae_encode(vae, batch.source)

    cond = model.encode_conditions(batch.source, batch.target_pose, batch.garment)
    l_mse = _denoising_term(model, z_target, drop_conditions(cond, p_drop, rng), sched, rng)

    rec_cond = model.encode_conditions(batch.source, batch.source_pose, batch.garment)
    l_rec = _denoising_term(model, z_source, drop_conditions(rec_cond, p_drop, rng), sched, rng)

    total = l_mse + l_rec * lambda_rec
    breakdown = LossBreakdown(
        total=total,
        l_mse=l_mse.item(),
        l_rec=l_rec.item(),
        l_overall=total.item(),
        lambda_rec=lambda_rec,
    )
    if not math.isfinite(breakdown.l_overall):
        raise NumericalError(f"Non-finite training loss: {breakdown.as_dict()}")
    return breakdown


# --- Guidance ---


@dataclass(frozen=True)
class GuidanceWeights:
    """Cumulative classifier-free guidance weights.

    Attributes:
        w_pose: Pose direction ε(∅, x_tp) − ε(∅, ∅)
        w_app: Appearance direction ε(x_s, x_tp) − ε(∅, x_tp)
        w_garment: Garment direction ε(x_g, x_tp) − ε(∅, x_tp)
        w_joint: Weight of the optional joint direction ε(x_s+x_g, x_tp) − ε(∅, x_tp)
        joint_branch: Evaluate the joint direction (a fifth forward pass)
    """

    w_pose: float = 2.0
    w_app: float = 2.0
    w_garment: float = 2.0
    w_joint: float = 0.0
    joint_branch: bool = False

    def __post_init__(self) -> None:
        for name in ("w_pose", "w_app", "w_garment", "w_joint"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"Guidance weight {name} must be finite")


def cfg_epsilon(
    model: DenoisingModel,
    z_t: Tensor,
    t: int | Sequence[int] | np.ndarray,
    cond: ConditionSet,
    w: GuidanceWeights,
) -> Tensor:
    """Cumulative guidance over four sequential forward passes.

    ε = ε(∅,∅) + w_pose·(ε(∅,x_tp) − ε(∅,∅)) + w_app·(ε(x_s,x_tp) − ε(∅,x_tp))
        + w_garment·(ε(x_g,x_tp) − ε(∅,x_tp))

    The (x_s, x_tp) branch keeps the garment dropped and the (x_g, x_tp)
    branch keeps the appearance dropped. With `w.joint_branch` a fifth pass
    with every condition present adds w_joint·(ε(x_s+x_g,x_tp) − ε(∅,x_tp)).
    """
    eps_null = model(z_t, t, cond.with_drops(app=True, pose=True, garment=True))
    eps_pose = model(z_t, t, cond.with_drops(app=True, pose=False, garment=True))
    eps_app = model(z_t, t, cond.with_drops(app=False, pose=False, garment=True))
    eps_garment = model(z_t, t, cond.with_drops(app=True, pose=False, garment=False))
    eps = (
        eps_null
        + (eps_pose - eps_null) * w.w_pose
        + (eps_app - eps_pose) * w.w_app
        + (eps_garment - eps_pose) * w.w_garment
    )
    if w.joint_branch:
        eps_joint = model(z_t, t, cond.with_drops(app=False, pose=False, garment=False))
        eps = eps + (eps_joint - eps_pose) * w.w_joint
    return eps


# --- DDIM ---


def ddim_timesteps(num_steps: int, steps: int) -> list[int]:
    """Uniform decreasing subsequence of {T, …, 1} ending at t = 1.

    Raises:
        ConfigurationError: If `steps` is not in [1, T]
    """
    if not 1 <= steps <= num_steps:
        raise ConfigurationError(f"DDIM steps must lie in [1, {num_steps}], got {steps}")
    grid = np.round(np.linspace(num_steps, 1, steps)).astype(int)
    return sorted({int(x) for x in grid}, reverse=True)


def ddim_step(
    z_t: Tensor,
    eps_pred: Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One DDIM update from t to t_prev (ᾱ_0 = 1).

    Raises:
        ValidationError: If t ≤ t_prev, either is out of range, or eta > 0
            without a generator
    """
    if not 0 <= t_prev < t <= sched.num_steps:
        raise ValidationError(
            f"DDIM needs 0 <= t_prev < t <= {sched.num_steps}, got t={t}, t_prev={t_prev}"
        )
    if eta < 0:
        raise ValidationError(f"eta must be non-negative, got {eta}")
    abar_t = float(sched.alpha_bar[t])
    abar_prev = float(sched.alpha_bar[t_prev])
    z0_hat = (z_t - eps_pred * math.sqrt(1.0 - abar_t)) * (1.0 / math.sqrt(abar_t))
    sigma = (
        eta
        * math.sqrt((1.0 - abar_prev) / (1.0 - abar_t))
        * math.sqrt(1.0 - abar_t / abar_prev)
    )
    direction = math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
    z_prev = z0_hat * math.sqrt(abar_prev) + eps_pred * direction
    if sigma > 0:
        if rng is None:
            raise ValidationError("Stochastic DDIM (eta > 0) requires a seeded generator")
        z_prev = z_prev + T.randn(z_t.shape, rng) * sigma
    return z_prev


def sample(
    model: DenoisingModel,
    vae: VaeModel,
    cond_inputs: tuple[Tensor, Any, Tensor],
    w: GuidanceWeights,
    sched: NoiseSchedule,
    steps: int = 50,
    seed: int = 0,
    eta: float = 0.0,
    bias_mode: str = "both",
    progress: bool = False,
) -> Tensor:
    """Generate try-on images for (source image, target pose, garment image).

    Starts from a seeded Gaussian latent, runs DDIM over a uniform subsequence
    with every ε from `cfg_epsilon`, decodes with the VAE and clamps to [−1, 1].

    Raises:
        ModelNotReadyError: If the model or the VAE was never trained or loaded
    """
    if not getattr(model, "ready", False):
        raise ModelNotReadyError("Try-on model weights are untrained; train or load a checkpoint")
    if not vae.ready:
        raise ModelNotReadyError("VAE weights are untrained; run train-vae or load a checkpoint")

    source, pose, garment = cond_inputs
    rng = np.random.default_rng(seed)
    timesteps = ddim_timesteps(sched.num_steps, steps)
    with T.no_grad():
        cond = model.encode_conditions(source, pose, garment, bias_mode=bias_mode)
        shape = (source.shape[0], vae.latent_channels, vae.latent_size, vae.latent_size)
        z = T.randn(shape, rng)
        pairs = list(zip(timesteps, [*timesteps[1:], 0]))
        for t, t_prev in tqdm(pairs, desc="ddim", disable=not progress, leave=False):
            eps = cfg_epsilon(model, z, t, cond, w)
            z = ddim_step(z, eps, t, t_prev, sched, eta, rng)
        image = T.clip(vae.decode(z), -1.0, 1.0)
    logger.debug("Sampled %d images over %d DDIM steps", source.shape[0], len(pairs))
    return image
