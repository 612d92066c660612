"""Condition encoders.

This module holds every network that turns an input into features:

- `VaeModel`: the latent-space autoencoder (4× downsampling, 4 channels).
- `HierarchicalEncoder`: patch-embedding + patch-merging transformer producing
  source (3 scales) and garment (4 scales) feature pyramids.
- `PoseEncoder`: Gaussian keypoint heatmaps through residual conv stages.
- `GarmentTokenDecoder`: learnable queries decoding the coarsest garment map
  into a fixed set of garment tokens.
- `AppearanceEncoder`: the zero-convolution-bounded transformer that turns a
  pair of same-scale source/garment maps into a query bias.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from vestido import tensor as T
from vestido.errors import DimensionError, ValidationError
from vestido.nn import (
    Conv2d,
    Downsample,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Parameter,
    ResidualBlock,
    TransformerDecoderLayer,
    TransformerLayer,
    Upsample,
    ZeroConvLayer,
    from_tokens,
    norm_groups,
    to_tokens,
    zero_conv_apply,
)
from vestido.tensor import Tensor

logger = logging.getLogger(__name__)

NUM_JOINTS = 13
LOGVAR_RANGE = (-30.0, 20.0)
PIXEL_TOLERANCE = 1e-5


def check_image_batch(image: Tensor, size: int, name: str = "image") -> None:
    """Validate a B×3×size×size batch with values in [−1, 1].

    Raises:
        DimensionError: If the batch has the wrong shape
        ValidationError: If any pixel lies outside [−1, 1]
    """
    if image.ndim != 4 or image.shape[1:] != (3, size, size):
        raise DimensionError(f"{name} must be B×3×{size}×{size}, got {image.shape}")
    low, high = float(image.data.min()), float(image.data.max())
    if low < -1.0 - PIXEL_TOLERANCE or high > 1.0 + PIXEL_TOLERANCE:
        raise ValidationError(
            f"{name} values must lie in [-1, 1], got range [{low:.4f}, {high:.4f}]"
        )


# --- VAE ---


class VaeModel(Module):
    """Convolutional VAE mapping size×size×3 images to (size/4)²×4 latents.

    Args:
        rng: Initialization generator
        base_channels: Width at full resolution (doubled after the first downsample)
        latent_channels: Channels of the latent map
        image_size: Input extent (square)
    """

    downsample_factor = 4

    def __init__(
        self,
        rng: np.random.Generator,
        base_channels: int = 32,
        latent_channels: int = 4,
        image_size: int = 64,
    ) -> None:
        c, c2 = base_channels, base_channels * 2
        self.image_size = image_size
        self.latent_channels = latent_channels
        # encoder
        self.enc_in = Conv2d(3, c, 3, rng)
        self.enc_block1 = ResidualBlock(c, c, rng)
        self.enc_down1 = Downsample(c, c2, rng)
        self.enc_block2 = ResidualBlock(c2, c2, rng)
        self.enc_down2 = Downsample(c2, c2, rng)
        self.enc_block3 = ResidualBlock(c2, c2, rng)
        self.enc_norm = GroupNorm(c2, norm_groups(c2))
        self.enc_out = Conv2d(c2, 2 * latent_channels, 3, rng)
        # decoder
        self.dec_in = Conv2d(latent_channels, c2, 3, rng)
        self.dec_block1 = ResidualBlock(c2, c2, rng)
        self.dec_up1 = Upsample(c2, rng)
        self.dec_block2 = ResidualBlock(c2, c, rng)
        self.dec_up2 = Upsample(c, rng)
        self.dec_block3 = ResidualBlock(c, c, rng)
        self.dec_norm = GroupNorm(c, norm_groups(c))
        self.dec_out = Conv2d(c, 3, 3, rng)
        logger.debug(
            "VAE with %d base channels maps %dpx images to %d latent channels",
            base_channels,
            image_size,
            latent_channels,
        )

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor

    def posterior(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Return the (mean, log-variance) latent maps of a pixel batch."""
        check_image_batch(image, self.image_size)
        h = self.enc_in(image)
        h = self.enc_block1(h)
        h = self.enc_block2(self.enc_down1(h))
        h = self.enc_block3(self.enc_down2(h))
        moments = self.enc_out(T.silu(self.enc_norm(h)))
        k = self.latent_channels
        mean = moments[:, :k]
        logvar = T.clip(moments[:, k:], *LOGVAR_RANGE)
        return mean, logvar

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(
                f"Latents must be B×{self.latent_channels}×h×w, got {z.shape}"
            )
        h = self.dec_block1(self.dec_in(z))
        h = self.dec_block2(self.dec_up1(h))
        h = self.dec_block3(self.dec_up2(h))
        return self.dec_out(T.silu(self.dec_norm(h)))

    def encode(
        self, image: Tensor, sample: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        return vae_encode(self, image, sample, rng)


def vae_encode(
    vae: VaeModel,
    image: Tensor,
    sample: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode pixels to latents: the posterior mean, or a reparameterized draw.

    Raises:
        ValidationError: If pixels lie outside [−1, 1] or sampling lacks a generator
    """
    mean, logvar = vae.posterior(image)
    if not sample:
        return mean
    if rng is None:
        raise ValidationError("Sampling latents requires a seeded generator")
    noise = T.randn(mean.shape, rng)
    return mean + T.exp(logvar * 0.5) * noise


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Mean KL(N(µ, σ²) ‖ N(0, 1)) per latent element; never negative."""
    return ((mean * mean + T.exp(logvar) - 1.0 - logvar) * 0.5).mean()


@dataclass
class VaeLoss:
    """Terms of the VAE objective.

    Attributes:
        total: reconstruction + beta · kl, differentiable
        reconstruction: MSE between decoded sample and input
        kl: KL term before weighting
    """

    total: Tensor
    reconstruction: float
    kl: float


def vae_loss(
    vae: VaeModel, image: Tensor, rng: np.random.Generator, beta: float = 1e-4
) -> VaeLoss:
    """MSE(decode(sample), image) + beta · KL(posterior ‖ N(0, 1))."""
    mean, logvar = vae.posterior(image)
    z = mean + T.exp(logvar * 0.5) * T.randn(mean.shape, rng)
    reconstruction = T.mse_loss(vae.decode(z), image)
    kl = kl_divergence(mean, logvar)
    return VaeLoss(
        total=reconstruction + kl * beta,
        reconstruction=reconstruction.item(),
        kl=kl.item(),
    )


# --- Feature pyramids ---


@dataclass
class FeaturePyramid:
    """Multi-scale feature maps, finest first.

    Each scale halves the spatial extents and follows the configured width
    ladder.
    """

    maps: list[Tensor]

    def __getitem__(self, index: int) -> Tensor:
        return self.maps[index]

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.maps)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [m.shape for m in self.maps]


class PatchMerging(Module):
    """Concatenate each 2×2 neighbourhood, normalize, project to the next width."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> None:
        self.norm = LayerNorm(4 * in_dim)
        self.reduction = Linear(4 * in_dim, out_dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        _, _, height, width = x.shape
        if height % 2 or width % 2:
            raise DimensionError(f"Patch merging needs even extents, got {x.shape}")
        merged = T.concat(
            [x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]],
            axis=1,
        )
        tokens = self.reduction(self.norm(to_tokens(merged)))
        return from_tokens(tokens, height // 2, width // 2)


class HierarchicalEncoder(Module):
    """Windowless hierarchical vision transformer.

    A stride-4 patch embedding is followed by one transformer stage per
    width in `widths`, with patch merging between stages.

    Args:
        rng: Initialization generator
        widths: Channel width of each output scale
        depth: Transformer layers per stage
        heads: Attention heads
        image_size: Input extent (square)
        patch_size: Patch-embedding stride
    """

    def __init__(
        self,
        rng: np.random.Generator,
        widths: Sequence[int] = (64, 128, 256),
        depth: int = 1,
        heads: int = 4,
        image_size: int = 64,
        patch_size: int = 4,
    ) -> None:
        self.widths = list(widths)
        self.image_size = image_size
        self.patch_embed = Conv2d(3, self.widths[0], patch_size, rng, stride=patch_size, pad=0)
        self.stages = ModuleList(
            [
                ModuleList([TransformerLayer(w, heads, rng) for _ in range(depth)])
                for w in self.widths
            ]
        )
        self.merges = ModuleList(
            [PatchMerging(a, b, rng) for a, b in zip(self.widths, self.widths[1:])]
        )

    def forward(self, image: Tensor) -> FeaturePyramid:
        check_image_batch(image, self.image_size)
        x = self.patch_embed(image)
        maps = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            _, _, height, width = x.shape
            tokens = to_tokens(x)
            for layer in stage:
                tokens = layer(tokens)
            x = from_tokens(tokens, height, width)
            maps.append(x)
        return FeaturePyramid(maps)


def encode_source(encoder: HierarchicalEncoder, image: Tensor) -> FeaturePyramid:
    """Source-person pyramid F_s (three scales under the default ladder)."""
    return encoder(image)


def encode_garment(encoder: HierarchicalEncoder, image: Tensor) -> FeaturePyramid:
    """Garment pyramid F_g (four scales under the default ladder)."""
    return encoder(image)


# --- Garment tokens ---


@dataclass
class GarmentTokens:
    """Decoded garment descriptors F_g^out, shape B×N_tokens×d_tok."""

    tokens: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


class GarmentTokenDecoder(Module):
    """Transformer decoder reading learnable queries against the flattened f_g4.

    Args:
        rng: Initialization generator
        memory_dim: Channel width of the coarsest garment scale
        memory_tokens: Spatial token count of the coarsest garment scale
        token_dim: Width of the output tokens
        num_tokens: Number of learnable queries / output tokens
        num_layers: Decoder layers
        heads: Attention heads
    """

    def __init__(
        self,
        rng: np.random.Generator,
        memory_dim: int = 512,
        memory_tokens: int = 4,
        token_dim: int = 256,
        num_tokens: int = 16,
        num_layers: int = 2,
        heads: int = 4,
    ) -> None:
        self.memory_dim = memory_dim
        self.memory_tokens = memory_tokens
        self.token_dim = token_dim
        self.num_tokens = num_tokens
        self.memory_proj = Linear(memory_dim, token_dim, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, (memory_tokens, token_dim)))
        self.queries = Parameter(rng.normal(0.0, 0.02, (num_tokens, token_dim)))
        self.layers = ModuleList(
            [TransformerDecoderLayer(token_dim, heads, rng) for _ in range(num_layers)]
        )
        self.norm = LayerNorm(token_dim)

    def forward(self, f_g4: Tensor) -> GarmentTokens:
        return garment_tokens(self, f_g4)


def garment_tokens(decoder: GarmentTokenDecoder, f_g4: Tensor) -> GarmentTokens:
    """Flatten f_g4, add positional embeddings, decode against the queries.

    Raises:
        DimensionError: If f_g4 is not the configured coarsest garment scale
    """
    if (
        f_g4.ndim != 4
        or f_g4.shape[1] != decoder.memory_dim
        or f_g4.shape[2] * f_g4.shape[3] != decoder.memory_tokens
    ):
        raise DimensionError(
            f"Coarsest garment map must be B×{decoder.memory_dim}×h×w with "
            f"h·w = {decoder.memory_tokens}, got {f_g4.shape}"
        )
    batch = f_g4.shape[0]
    memory = decoder.memory_proj(to_tokens(f_g4)) + decoder.pos_embed
    x = T.expand(decoder.queries, (batch, decoder.num_tokens, decoder.token_dim))
    for layer in decoder.layers:
        x = layer(x, memory)
    return GarmentTokens(decoder.norm(x))


# --- Pose ---


def render_heatmaps(
    keypoints: Sequence[Sequence[float]], size: int = 64, sigma: float = 1.5
) -> np.ndarray:
    """One Gaussian channel per joint, peak 1 at the keypoint pixel.

    Invisible joints give all-zero channels.

    Raises:
        ValidationError: On a wrong joint count or a visible out-of-bounds joint
    """
    points = np.asarray(keypoints, dtype=np.float64)
    if points.shape != (NUM_JOINTS, 3):
        raise ValidationError(
            f"Expected {NUM_JOINTS} (x, y, visible) keypoints, got shape {points.shape}"
        )
    grid = np.arange(size, dtype=np.float64)
    heatmaps = np.zeros((NUM_JOINTS, size, size))
    for joint, (x, y, visible) in enumerate(points):
        if not visible:
            continue
        if not (0.0 <= x <= size - 1 and 0.0 <= y <= size - 1):
            raise ValidationError(
                f"Visible keypoint {joint} at ({x:.2f}, {y:.2f}) lies outside "
                f"the {size}×{size} frame"
            )
        gx = np.exp(-((grid - x) ** 2) / (2.0 * sigma**2))
        gy = np.exp(-((grid - y) ** 2) / (2.0 * sigma**2))
        heatmaps[joint] = np.outer(gy, gx)
    return heatmaps


class PoseEncoder(Module):
    """Heatmaps → ×1/`downscale` → residual conv stages, one per pose scale.

    Args:
        rng: Initialization generator
        widths: Channel width of each pose scale
        image_size: Heatmap extent
        downscale: Average-pooling factor applied before the conv stages
        sigma: Heatmap Gaussian width in pixels
    """

    def __init__(
        self,
        rng: np.random.Generator,
        widths: Sequence[int] = (64, 128, 256),
        image_size: int = 64,
        downscale: int = 4,
        sigma: float = 1.5,
    ) -> None:
        self.widths = list(widths)
        self.image_size = image_size
        self.downscale = downscale
        self.sigma = sigma
        self.conv_in = Conv2d(NUM_JOINTS, self.widths[0], 3, rng)
        self.blocks = ModuleList([ResidualBlock(w, w, rng) for w in self.widths])
        self.downs = ModuleList(
            [Downsample(a, b, rng) for a, b in zip(self.widths, self.widths[1:])]
        )

    def heatmaps(self, poses: Sequence[Sequence[Sequence[float]]]) -> Tensor:
        return Tensor(
            np.stack([render_heatmaps(p, self.image_size, self.sigma) for p in poses])
        )

    def forward(self, heatmaps: Tensor) -> FeaturePyramid:
        expected = (NUM_JOINTS, self.image_size, self.image_size)
        if heatmaps.ndim != 4 or heatmaps.shape[1:] != expected:
            raise DimensionError(f"Heatmaps must be B×{expected}, got {heatmaps.shape}")
        x = self.conv_in(T.avg_pool2d(heatmaps, self.downscale))
        maps = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.downs[i - 1](x)
            x = block(x)
            maps.append(x)
        return FeaturePyramid(maps)


def encode_pose(
    encoder: PoseEncoder, poses: Sequence[Sequence[Sequence[float]]]
) -> FeaturePyramid:
    """Render a batch of 13-joint poses to heatmaps and encode them."""
    return encoder(encoder.heatmaps(poses))


# --- Appearance bias ---


class AppearanceBiasNet(Module):
    """φ_A at one scale: zero conv → transformer layers → zero conv."""

    def __init__(self, width: int, num_layers: int, heads: int, rng: np.random.Generator) -> None:
        self.width = width
        self.zero_in = ZeroConvLayer(2 * width, width, rng)
        self.layers = ModuleList([TransformerLayer(width, heads, rng) for _ in range(num_layers)])
        self.zero_out = ZeroConvLayer(width, width, rng)

    def forward(self, f_s: Tensor, f_g: Tensor) -> Tensor:
        _, _, height, width = f_s.shape
        x = zero_conv_apply(self.zero_in, T.concat([f_s, f_g], axis=1))
        tokens = to_tokens(x)
        for layer in self.layers:
            tokens = layer(tokens)
        x = zero_conv_apply(self.zero_out, from_tokens(tokens, height, width))
        return to_tokens(x)


class AppearanceEncoder(Module):
    """One φ_A per UNet scale; identically zero at initialization."""

    def __init__(
        self,
        rng: np.random.Generator,
        widths: Sequence[int] = (64, 128, 256),
        num_layers: int = 1,
        heads: int = 4,
    ) -> None:
        self.widths = list(widths)
        self.scales = ModuleList(
            [AppearanceBiasNet(w, num_layers, heads, rng) for w in self.widths]
        )


def appearance_bias(
    encoder: AppearanceEncoder, f_s_l: Tensor, f_g_l: Tensor, level: int
) -> Tensor:
    """B = φ_A(concat(F_s^l, F_g^l)) as a B×tokens_l×d_l bias.

    Raises:
        DimensionError: If the two maps are not both at scale `level`
    """
    if not 0 <= level < len(encoder.widths):
        raise DimensionError(f"No appearance encoder for scale {level}")
    width = encoder.widths[level]
    if f_s_l.shape != f_g_l.shape or f_s_l.ndim != 4 or f_s_l.shape[1] != width:
        raise DimensionError(
            f"Scale {level} expects matching B×{width}×h×w maps, "
            f"got {f_s_l.shape} and {f_g_l.shape}"
        )
    return encoder.scales[level](f_s_l, f_g_l)
