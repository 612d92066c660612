"""Denoising UNet with bias-augmented query attention.

Each attention site owns a learnable query bank entry Q_learn^l with one row
per spatial token of its block. Condition features enter as additive biases
on those queries; garment tokens serve as keys and values everywhere:

    F_o^l = softmax((Q_learn^l + bias) Kᵀ / √d_l) V

F_o^l is folded back into a feature map, passed through a zero-initialized
1×1 projection and added to the block's hidden state. Down blocks take the
pose bias, up blocks the appearance bias φ_A(F_s^l, F_g^l).
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from vestido import tensor as T
from vestido.encoders import (
    AppearanceEncoder,
    FeaturePyramid,
    GarmentTokenDecoder,
    GarmentTokens,
    HierarchicalEncoder,
    PoseEncoder,
    appearance_bias,
    check_image_batch,
    encode_garment,
    encode_pose,
    encode_source,
    garment_tokens,
)
from vestido.errors import ConfigurationError, DimensionError, ValidationError
from vestido.nn import (
    Conv2d,
    Downsample,
    GroupNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    ResidualBlock,
    TimeEmbedding,
    Upsample,
    ZeroConvLayer,
    attention_core,
    from_tokens,
    norm_groups,
    to_tokens,
    zero_conv_apply,
)
from vestido.tensor import Tensor

logger = logging.getLogger(__name__)

BIAS_MODES = ("both", "app-only", "app-2x", "garment-only", "garment-2x")


# --- Query banks and key/value projections ---


class QueryEntry(Module):
    """One attention site: Q_learn^l and its zero-initialized output projection."""

    def __init__(self, tokens: int, width: int, rng: np.random.Generator) -> None:
        self.tokens = tokens
        self.width = width
        self.query = Parameter(rng.normal(0.0, 1.0 / np.sqrt(width), (tokens, width)))
        self.out_proj = ZeroConvLayer(width, width, rng)


class QueryBank(Module):
    """Per-scale learnable queries; shapes are fixed at construction."""

    def __init__(
        self, token_counts: Sequence[int], widths: Sequence[int], rng: np.random.Generator
    ) -> None:
        self.entries = ModuleList(
            [QueryEntry(n, w, rng) for n, w in zip(token_counts, widths)]
        )

    def __getitem__(self, level: int) -> QueryEntry:
        if not 0 <= level < len(self.entries):
            raise ConfigurationError(f"No query bank entry for scale {level}")
        return self.entries[level]

    def __len__(self) -> int:
        return len(self.entries)


class KvProjection(Module):
    """Bias-free W_k^l, W_v^l mapping garment tokens to each scale's width."""

    def __init__(
        self, token_dim: int, widths: Sequence[int], rng: np.random.Generator
    ) -> None:
        self.widths = list(widths)
        self.to_k = ModuleList([Linear(token_dim, w, rng, bias=False) for w in widths])
        self.to_v = ModuleList([Linear(token_dim, w, rng, bias=False) for w in widths])


def project_kv(
    kv: KvProjection, tokens: GarmentTokens | Tensor, level: int
) -> tuple[Tensor, Tensor]:
    """K = F_g^out W_k^l and V = F_g^out W_v^l, each N_tokens×d_l (per batch item).

    Raises:
        ConfigurationError: If `level` has no attention site
    """
    if not 0 <= level < len(kv.widths):
        raise ConfigurationError(f"No key/value projection for scale {level}")
    matrix = tokens.tokens if isinstance(tokens, GarmentTokens) else tokens
    return kv.to_k[level](matrix), kv.to_v[level](matrix)


def bqa_apply(
    hidden: Tensor,
    level: int,
    bias: Tensor,
    key: Tensor,
    value: Tensor,
    bank: QueryBank,
    heads: int = 1,
    capture: dict[str, Tensor] | None = None,
) -> Tensor:
    """Bias-augmented query attention, added residually to `hidden`.

    Args:
        hidden: B×d_l×h×w block state with h·w = tokens_l
        level: Scale index into `bank`
        bias: tokens_l×d_l or B×tokens_l×d_l query bias
        key: N×d_l or B×N×d_l keys
        value: N×d_l or B×N×d_l values
        bank: Query bank holding Q_learn^l
        heads: Attention heads (1 reproduces the single-head formula)
        capture: If given, receives the attention output under "attention"

    Raises:
        DimensionError: If the bias shape differs from Q_learn^l or the hidden
            map cannot hold tokens_l tokens
    """
    entry = bank[level]
    query_shape = (entry.tokens, entry.width)
    if bias.shape[-2:] != query_shape or bias.ndim not in (2, 3):
        raise DimensionError(
            f"Bias shape {bias.shape} does not match query shape {query_shape}"
        )
    batch, channels, height, width = hidden.shape
    if channels != entry.width or height * width != entry.tokens:
        raise DimensionError(
            f"Hidden map {hidden.shape} does not fit scale {level} "
            f"({entry.tokens} tokens of width {entry.width})"
        )
    queries = entry.query + bias
    if queries.ndim == 2:
        queries = T.expand(queries, (batch, *query_shape))
    attended = attention_core(queries, key, value, heads)
    if attended.ndim == 2:
        attended = T.expand(attended, (batch, *query_shape))
    if capture is not None:
        capture["attention"] = attended
    out = zero_conv_apply(entry.out_proj, from_tokens(attended, height, width))
    return hidden + out


# --- Conditions ---


@dataclass
class ConditionSet:
    """Everything the UNet is conditioned on, with per-sample drop flags.

    A dropped condition is swapped for the model's learned null embedding at
    use time; the encoded features stay in place.

    Attributes:
        source: Source-person pyramid F_s
        pose: Pose pyramid F_p
        garment: Garment pyramid F_g
        tokens: Garment tokens F_g^out
        drop_app: Per-sample appearance drop flags, shape (B,)
        drop_pose: Per-sample pose drop flags, shape (B,)
        drop_garment: Per-sample garment drop flags, shape (B,)
        bias_mode: Which features feed the appearance encoder (ablations)
    """

    source: FeaturePyramid
    pose: FeaturePyramid
    garment: FeaturePyramid
    tokens: GarmentTokens
    drop_app: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    drop_pose: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    drop_garment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    bias_mode: str = "both"

    def __post_init__(self) -> None:
        batch = self.batch_size
        for name in ("drop_app", "drop_pose", "drop_garment"):
            flags = np.asarray(getattr(self, name), dtype=bool)
            if flags.size == 0:
                flags = np.zeros(batch, dtype=bool)
            elif flags.ndim == 0:
                flags = np.full(batch, bool(flags))
            if flags.shape != (batch,):
                raise DimensionError(
                    f"{name} must hold one flag per sample ({batch}), got {flags.shape}"
                )
            setattr(self, name, flags)
        if self.bias_mode not in BIAS_MODES:
            raise ConfigurationError(
                f"Unknown bias mode '{self.bias_mode}' (expected one of {', '.join(BIAS_MODES)})"
            )

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def with_drops(
        self,
        app: bool | np.ndarray | None = None,
        pose: bool | np.ndarray | None = None,
        garment: bool | np.ndarray | None = None,
    ) -> ConditionSet:
        """Copy with the given drop flags replaced; None keeps the current flags."""
        return replace(
            self,
            drop_app=self.drop_app if app is None else app,
            drop_pose=self.drop_pose if pose is None else pose,
            drop_garment=self.drop_garment if garment is None else garment,
        )

    def with_bias_mode(self, mode: str) -> ConditionSet:
        return replace(self, bias_mode=mode)


def _keep_mask(drop: np.ndarray, like: Tensor) -> Tensor:
    """Constant (B, 1, …) mask, 1 where the condition is kept."""
    shape = (drop.shape[0],) + (1,) * (like.ndim - 1)
    return Tensor((~drop).astype(like.dtype).reshape(shape))


def _substitute(x: Tensor, null: Tensor, drop: np.ndarray) -> Tensor:
    """Replace dropped samples of `x` by the broadcast `null` embedding."""
    if not drop.any():
        return x
    keep = _keep_mask(drop, x)
    return x * keep + null * (1.0 - keep)


# --- UNet ---


class _NullEmbedding(Module):
    def __init__(self, shape: tuple[int, ...], rng: np.random.Generator) -> None:
        self.value = Parameter(rng.normal(0.0, 0.02, shape))


class UNetModel(Module):
    """Three-scale conditional UNet over B×C×s×s latents.

    Args:
        rng: Initialization generator
        widths: Channel width per scale (finest first)
        latent_channels: Latent map channels
        latent_size: Latent extent at the finest scale
        token_dim: Garment token width
        num_tokens: Garment token count
        num_timesteps: Largest accepted timestep
        time_dim: Sinusoidal embedding width
        time_embed_dim: Width after the time MLP
        attention_heads: Heads in every attention site
        appearance_layers: Transformer layers inside φ_A
        appearance_heads: Heads inside φ_A
    """

    def __init__(
        self,
        rng: np.random.Generator,
        widths: Sequence[int] = (64, 128, 256),
        latent_channels: int = 4,
        latent_size: int = 16,
        token_dim: int = 256,
        num_tokens: int = 16,
        num_timesteps: int = 1000,
        time_dim: int = 64,
        time_embed_dim: int = 256,
        attention_heads: int = 4,
        appearance_layers: int = 1,
        appearance_heads: int = 4,
    ) -> None:
        self.widths = list(widths)
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.num_timesteps = num_timesteps
        self.attention_heads = attention_heads
        extents = [latent_size // 2**i for i in range(len(self.widths))]
        if extents[-1] < 1 or any(e * 2**i != latent_size for i, e in enumerate(extents)):
            raise ConfigurationError(
                f"Latent size {latent_size} cannot be halved {len(self.widths) - 1} times"
            )
        self.extents = extents
        token_counts = [e * e for e in extents]

        self.time_embedding = TimeEmbedding(time_dim)
        self.time_fc1 = Linear(time_dim, time_embed_dim, rng)
        self.time_fc2 = Linear(time_embed_dim, time_embed_dim, rng)
        self.conv_in = Conv2d(latent_channels, self.widths[0], 3, rng)

        # down path
        self.down_blocks = ModuleList(
            [ResidualBlock(w, w, rng, emb_dim=time_embed_dim) for w in self.widths]
        )
        self.downsamplers = ModuleList(
            [Downsample(a, b, rng) for a, b in zip(self.widths, self.widths[1:])]
        )
        self.mid_block = ResidualBlock(
            self.widths[-1], self.widths[-1], rng, emb_dim=time_embed_dim
        )
        # up path, coarsest first in construction order per scale index
        up_in = []
        for level, w in enumerate(self.widths):
            incoming = self.widths[level + 1] if level + 1 < len(self.widths) else w
            up_in.append(incoming + w)
        self.up_blocks = ModuleList(
            [
                ResidualBlock(up_in[level], w, rng, emb_dim=time_embed_dim)
                for level, w in enumerate(self.widths)
            ]
        )
        self.upsamplers = ModuleList([Upsample(w, rng) for w in self.widths[1:]])
        self.norm_out = GroupNorm(self.widths[0], norm_groups(self.widths[0]))
        self.conv_out = Conv2d(self.widths[0], latent_channels, 3, rng)

        # conditioning
        self.down_bank = QueryBank(token_counts, self.widths, rng)
        self.up_bank = QueryBank(token_counts, self.widths, rng)
        self.kv = KvProjection(token_dim, self.widths, rng)
        self.pose_proj = ModuleList([Linear(w, w, rng) for w in self.widths])
        self.appearance = AppearanceEncoder(
            rng, self.widths, num_layers=appearance_layers, heads=appearance_heads
        )
        # learned null embeddings substituted for dropped conditions
        self.null_pose = ModuleList(
            [_NullEmbedding((n, w), rng) for n, w in zip(token_counts, self.widths)]
        )
        self.null_source = ModuleList(
            [_NullEmbedding((w, e, e), rng) for w, e in zip(self.widths, extents)]
        )
        self.null_garment = ModuleList(
            [_NullEmbedding((w, e, e), rng) for w, e in zip(self.widths, extents)]
        )
        self.null_tokens = _NullEmbedding((num_tokens, token_dim), rng)

    def forward(
        self,
        z_t: Tensor,
        t: int | Sequence[int] | np.ndarray,
        cond: ConditionSet,
        bqa_enabled: bool = True,
        capture: dict[str, Any] | None = None,
    ) -> Tensor:
        return unet_forward(self, z_t, t, cond, bqa_enabled, capture)


def _timesteps(unet: UNetModel, t: int | Sequence[int] | np.ndarray, batch: int) -> np.ndarray:
    """One timestep per sample, checked against [0, T].

    Timesteps are 1-based like the noise schedule: t = T is the noisiest
    step and t = 0 is the clean latent (ᾱ_0 = 1), so both ends are valid.
    """
    steps = np.asarray(t)
    if steps.ndim == 0:
        steps = np.full(batch, int(steps))
    if steps.shape != (batch,):
        raise DimensionError(f"Expected one timestep per sample ({batch}), got {steps.shape}")
    if np.any(steps < 0) or np.any(steps > unet.num_timesteps):
        raise ValidationError(
            f"Timesteps must lie in [0, {unet.num_timesteps}], got {steps.tolist()}"
        )
    return steps


def pose_bias(unet: UNetModel, cond: ConditionSet, level: int) -> Tensor:
    """proj(f_p^l) as B×tokens_l×d_l, or the learned null for dropped samples."""
    projected = unet.pose_proj[level](to_tokens(cond.pose[level]))
    return _substitute(projected, unet.null_pose[level].value, cond.drop_pose)


def up_bias(unet: UNetModel, cond: ConditionSet, level: int) -> Tensor:
    """φ_A input assembled according to the drop flags and the bias mode."""
    f_s = _substitute(cond.source[level], unet.null_source[level].value, cond.drop_app)
    f_g = _substitute(cond.garment[level], unet.null_garment[level].value, cond.drop_garment)
    mode = cond.bias_mode
    if mode.startswith("app"):
        f_g = f_g * 0.0
    elif mode.startswith("garment"):
        f_s = f_s * 0.0
    bias = appearance_bias(unet.appearance, f_s, f_g, level)
    return bias * 2.0 if mode.endswith("2x") else bias


def conditioned_tokens(unet: UNetModel, cond: ConditionSet) -> Tensor:
    return _substitute(cond.tokens.tokens, unet.null_tokens.value, cond.drop_garment)


def unet_forward(
    unet: UNetModel,
    z_t: Tensor,
    t: int | Sequence[int] | np.ndarray,
    cond: ConditionSet,
    bqa_enabled: bool = True,
    capture: dict[str, Any] | None = None,
) -> Tensor:
    """Predict the noise ε in `z_t` at timestep(s) `t` under `cond`.

    Args:
        unet: The network
        z_t: B×C×s×s noisy latents
        t: One timestep for the whole batch or one per sample, within [0, T]
        cond: Encoded conditions with drop flags
        bqa_enabled: False skips every attention site (plain UNet)
        capture: If given, filled with per-site biases and attention outputs
            under keys "down{l}" / "up{l}"

    Raises:
        DimensionError: If `z_t` does not match the latent shape
        ValidationError: If a timestep is out of range
    """
    expected = (unet.latent_channels, unet.latent_size, unet.latent_size)
    if z_t.ndim != 4 or z_t.shape[1:] != expected:
        raise DimensionError(f"Latents must be B×{expected}, got {z_t.shape}")
    batch = z_t.shape[0]
    if cond.batch_size != batch:
        raise DimensionError(
            f"Conditions hold {cond.batch_size} samples, latents {batch}"
        )
    steps = _timesteps(unet, t, batch)
    emb = unet.time_fc2(T.silu(unet.time_fc1(unet.time_embedding(steps))))

    tokens = conditioned_tokens(unet, cond) if bqa_enabled else None
    heads = unet.attention_heads

    def attend(h: Tensor, level: int, site: str, bias: Tensor, bank: QueryBank) -> Tensor:
        key, value = project_kv(unet.kv, tokens, level)
        record = {} if capture is not None else None
        out = bqa_apply(h, level, bias, key, value, bank, heads, record)
        if capture is not None:
            capture[f"{site}{level}"] = {"bias": bias, **record}
        return out

    h = unet.conv_in(z_t)
    skips = []
    for level, block in enumerate(unet.down_blocks):
        if level > 0:
            h = unet.downsamplers[level - 1](h)
        h = block(h, emb)
        if bqa_enabled:
            h = attend(h, level, "down", pose_bias(unet, cond, level), unet.down_bank)
        skips.append(h)

    h = unet.mid_block(h, emb)

    for level in reversed(range(len(unet.widths))):
        h = unet.up_blocks[level](T.concat([h, skips[level]], axis=1), emb)
        if bqa_enabled:
            h = attend(h, level, "up", up_bias(unet, cond, level), unet.up_bank)
        if level > 0:
            h = unet.upsamplers[level - 1](h)

    return unet.conv_out(T.silu(unet.norm_out(h)))


# --- Full try-on model ---


class VtonModel(Module):
    """Condition encoders plus the denoising UNet, trained jointly.

    Args:
        rng: Initialization generator
        widths: UNet / source / pose width ladder
        garment_extra_width: Width of the coarsest garment scale
        image_size: Pixel extent of every input image
        token_dim: Garment token width
        num_tokens: Garment token count
        decoder_layers: Garment token decoder depth
        decoder_heads: Garment token decoder heads
        encoder_depth: Transformer layers per pyramid stage
        encoder_heads: Pyramid attention heads
        pose_sigma: Heatmap Gaussian width
        unet_kwargs: Forwarded to `UNetModel`
    """

    def __init__(
        self,
        rng: np.random.Generator,
        widths: Sequence[int] = (64, 128, 256),
        garment_extra_width: int = 512,
        image_size: int = 64,
        token_dim: int = 256,
        num_tokens: int = 16,
        decoder_layers: int = 2,
        decoder_heads: int = 4,
        encoder_depth: int = 1,
        encoder_heads: int = 4,
        pose_sigma: float = 1.5,
        **unet_kwargs: Any,
    ) -> None:
        widths = list(widths)
        self.image_size = image_size
        latent_size = image_size // 4
        coarsest = latent_size // 2 ** len(widths)
        if coarsest < 1:
            raise ConfigurationError(
                f"Image size {image_size} is too small for {len(widths) + 1} garment scales"
            )
        self.source_encoder = HierarchicalEncoder(
            rng, widths, encoder_depth, encoder_heads, image_size
        )
        self.garment_encoder = HierarchicalEncoder(
            rng, [*widths, garment_extra_width], encoder_depth, encoder_heads, image_size
        )
        self.pose_encoder = PoseEncoder(rng, widths, image_size, sigma=pose_sigma)
        self.token_decoder = GarmentTokenDecoder(
            rng,
            memory_dim=garment_extra_width,
            memory_tokens=coarsest * coarsest,
            token_dim=token_dim,
            num_tokens=num_tokens,
            num_layers=decoder_layers,
            heads=decoder_heads,
        )
        self.unet = UNetModel(
            rng,
            widths,
            latent_size=latent_size,
            token_dim=token_dim,
            num_tokens=num_tokens,
            **unet_kwargs,
        )
        logger.debug(
            "Try-on model: widths %s, %d garment tokens of width %d", widths, num_tokens, token_dim
        )

    @classmethod
    def from_config(cls, model: Any, num_timesteps: int, rng: np.random.Generator) -> VtonModel:
        """Build from a `ModelConfig` section."""
        return cls(
            rng,
            widths=model.widths,
            garment_extra_width=model.garment_extra_width,
            image_size=model.image_size,
            token_dim=model.token_dim,
            num_tokens=model.num_tokens,
            decoder_layers=model.decoder_layers,
            decoder_heads=model.decoder_heads,
            encoder_depth=model.encoder_depth,
            encoder_heads=model.encoder_heads,
            pose_sigma=model.pose_sigma,
            latent_channels=model.latent_channels,
            num_timesteps=num_timesteps,
            time_dim=model.time_dim,
            time_embed_dim=model.time_embed_dim,
            attention_heads=model.attention_heads,
            appearance_layers=model.appearance_layers,
            appearance_heads=model.appearance_heads,
        )

    def encode_conditions(
        self,
        source: Tensor,
        pose: Tensor | Sequence[Sequence[Sequence[float]]],
        garment: Tensor,
        bias_mode: str = "both",
    ) -> ConditionSet:
        """Encode (source image, target pose, garment image) with nothing dropped.

        `pose` is either a B×13×s×s heatmap batch or B lists of 13 keypoints.
        """
        check_image_batch(source, self.image_size, "source")
        check_image_batch(garment, self.image_size, "garment")
        if source.shape[0] != garment.shape[0]:
            raise DimensionError(
                f"Source batch {source.shape[0]} differs from garment batch {garment.shape[0]}"
            )
        f_s = encode_source(self.source_encoder, source)
        f_g = encode_garment(self.garment_encoder, garment)
        f_p = (
            self.pose_encoder(pose)
            if isinstance(pose, Tensor)
            else encode_pose(self.pose_encoder, pose)
        )
        tokens = garment_tokens(self.token_decoder, f_g[-1])
        return ConditionSet(f_s, f_p, f_g, tokens, bias_mode=bias_mode)

    def forward(
        self,
        z_t: Tensor,
        t: int | Sequence[int] | np.ndarray,
        cond: ConditionSet,
        bqa_enabled: bool = True,
        capture: dict[str, Any] | None = None,
    ) -> Tensor:
        return unet_forward(self.unet, z_t, t, cond, bqa_enabled, capture)
