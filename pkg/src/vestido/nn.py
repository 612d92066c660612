"""Neural building blocks on top of the tensor engine.

Provides a small module system (parameter discovery, state dicts, freezing)
and the layers the encoders and the denoising UNet are assembled from:
linear and convolutional layers, zero-initialized convolutions, group/layer
normalization, sinusoidal timestep embeddings, residual blocks and
multi-head scaled-dot-product attention.

Weights default to Kaiming-uniform initialization with negative slope √5
(bound 1/√fan_in), the usual default for convolutional and linear layers.
"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from vestido import tensor as T
from vestido.errors import (
    ConfigurationError,
    DimensionError,
    IntegrityError,
    ValidationError,
)
from vestido.tensor import Tensor


class Parameter(Tensor):
    """A tensor that is trained: always created with `requires_grad=True`."""

    def __init__(self, data: Any) -> None:
        super().__init__(data, requires_grad=True)


class Module:
    """Base class for anything that owns parameters.

    Parameters and sub-modules are discovered from instance attributes, in
    assignment order, so parameter names are stable across runs.
    """

    ready: bool = False

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def freeze(self) -> None:
        """Stop recording gradients for every parameter of this module."""
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None

    def astype(self, dtype: Any) -> Module:
        """Cast every parameter to `dtype` in place and return self."""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters, matching names and shapes exactly.

        Raises:
            IntegrityError: If names are missing or unexpected, or shapes differ
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise IntegrityError(
                f"State dict does not match module: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise IntegrityError(
                    f"Shape mismatch for '{name}': stored {value.shape}, "
                    f"module {param.shape}"
                )
            param.data = value.astype(param.dtype)


class ModuleList(Module):
    """An indexable sequence of sub-modules named by position."""

    def __init__(self, modules: Sequence[Module] = ()) -> None:
        self._items: list[Module] = list(modules)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for i, module in enumerate(self._items):
            yield from module.named_parameters(f"{prefix}{i}.")

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def append(self, module: Module) -> None:
        self._items.append(module)


def kaiming_uniform(
    shape: Sequence[int], fan_in: int, rng: np.random.Generator
) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def norm_groups(channels: int, max_groups: int = 32) -> int:
    """Largest group count dividing `channels` that does not exceed `max_groups`."""
    return math.gcd(channels, max_groups)


class Linear(Module):
    """y = x W + b with W stored as (in_features, out_features)."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
    ) -> None:
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            kaiming_uniform((in_features, out_features), in_features, rng)
        )
        self.bias = (
            Parameter(kaiming_uniform((out_features,), in_features, rng))
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last extent {self.in_features}, got {x.shape}"
            )
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    """2-d convolution with 'same'-style padding by default."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int | None = None,
        bias: bool = True,
    ) -> None:
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            kaiming_uniform(
                (out_channels, in_channels, kernel_size, kernel_size), fan_in, rng
            )
        )
        self.bias = (
            Parameter(kaiming_uniform((out_channels,), fan_in, rng)) if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        if self.bias is None:
            return out
        return out + self.bias.reshape(1, self.out_channels, 1, 1)


class ZeroConvLayer(Conv2d):
    """1×1 convolution whose kernel and bias start at exactly zero.

    Any branch ending in a zero convolution contributes nothing until training
    moves its weights.
    """

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator
    ) -> None:
        super().__init__(in_channels, out_channels, 1, rng, pad=0)
        self.weight.data = np.zeros_like(self.weight.data)
        assert self.bias is not None
        self.bias.data = np.zeros_like(self.bias.data)


def zero_conv_apply(layer: ZeroConvLayer, x: Tensor) -> Tensor:
    """Shape-preserving 1×1 convolution through a zero-initialized layer.

    Raises:
        DimensionError: If the input channel count differs from the layer's
    """
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise DimensionError(
            f"Zero convolution expects {layer.in_channels} channels, got {x.shape}"
        )
    return layer(x)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5) -> None:
        if channels % groups:
            raise ConfigurationError(
                f"GroupNorm: {channels} channels not divisible into {groups} groups"
            )
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5) -> None:
        self.eps = eps
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# --- Timestep embedding ---


def time_embed(
    t: int | Sequence[int] | np.ndarray, dim: int, max_period: float = 10000.0
) -> Tensor:
    """Sinusoidal embedding: sin(t / period^(2i/dim)) then cos(·), i < dim/2.

    A scalar `t` yields shape (dim,); a sequence of B timesteps yields (B, dim).

    Raises:
        ConfigurationError: If `dim` is not a positive even number
        ValidationError: If any timestep is negative
    """
    if dim <= 0 or dim % 2:
        raise ConfigurationError(f"Time embedding width must be even, got {dim}")
    steps = np.asarray(t, dtype=np.float64)
    if np.any(steps < 0):
        raise ValidationError(f"Timesteps must be non-negative, got {t}")
    half = dim // 2
    freqs = max_period ** (-2.0 * np.arange(half) / dim)
    angles = steps[..., None] * freqs
    return Tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=-1))


@dataclass(frozen=True)
class TimeEmbedding:
    """Callable sinusoidal embedding of fixed width.

    Attributes:
        dim: Output width (even)
        max_period: Longest wavelength of the sinusoids
    """

    dim: int
    max_period: float = 10000.0

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.dim % 2:
            raise ConfigurationError(f"Time embedding width must be even, got {self.dim}")

    def __call__(self, t: int | Sequence[int] | np.ndarray) -> Tensor:
        return time_embed(t, self.dim, self.max_period)


# --- Residual blocks ---


class ResidualBlock(Module):
    """GroupNorm → SiLU → conv, twice, with an optional timestep projection.

    Spatial extents are preserved; channels go from `in_channels` to
    `out_channels` with a 1×1 skip convolution when they differ.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        emb_dim: int | None = None,
        max_groups: int = 32,
    ) -> None:
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.emb_dim = emb_dim
        self.norm1 = GroupNorm(in_channels, norm_groups(in_channels, max_groups))
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.time_proj = (
            Linear(emb_dim, out_channels, rng) if emb_dim is not None else None
        )
        self.norm2 = GroupNorm(out_channels, norm_groups(out_channels, max_groups))
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.skip = (
            Conv2d(in_channels, out_channels, 1, rng, pad=0)
            if in_channels != out_channels
            else None
        )

    def forward(self, x: Tensor, t_emb: Tensor | None = None) -> Tensor:
        return res_block_apply(self, x, t_emb)


def res_block_apply(
    block: ResidualBlock, x: Tensor, t_emb: Tensor | None = None
) -> Tensor:
    """Run a residual block; `t_emb` is (emb_dim,) or (B, emb_dim).

    Raises:
        DimensionError: If `t_emb` does not match the block's embedding width
    """
    if x.ndim != 4 or x.shape[1] != block.in_channels:
        raise DimensionError(
            f"ResidualBlock expects {block.in_channels} input channels, got {x.shape}"
        )
    h = block.conv1(T.silu(block.norm1(x)))
    if block.time_proj is not None:
        if t_emb is None or t_emb.shape[-1] != block.emb_dim:
            got = None if t_emb is None else t_emb.shape
            raise DimensionError(
                f"ResidualBlock expects a time embedding of width {block.emb_dim}, got {got}"
            )
        projected = block.time_proj(T.silu(t_emb))
        lead = projected.shape[0] if projected.ndim == 2 else 1
        h = h + projected.reshape(lead, block.out_channels, 1, 1)
    h = block.conv2(T.silu(block.norm2(h)))
    skip = block.skip(x) if block.skip is not None else x
    return skip + h


class Downsample(Module):
    """Stride-2 3×3 convolution halving the spatial extents."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        self.conv = Conv2d(in_channels, out_channels, 3, rng, stride=2, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """Nearest-neighbour ×2 upsampling followed by a 3×3 convolution."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.conv = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest(x, 2))


# --- Attention ---


def to_tokens(x: Tensor) -> Tensor:
    """B×C×H×W feature map → B×(H·W)×C token matrix."""
    batch, channels, height, width = x.shape
    return x.reshape(batch, channels, height * width).transpose(0, 2, 1)


def from_tokens(x: Tensor, height: int, width: int) -> Tensor:
    """B×(H·W)×C token matrix → B×C×H×W feature map."""
    batch, count, channels = x.shape
    if count != height * width:
        raise DimensionError(f"{count} tokens cannot fill a {height}×{width} map")
    return x.transpose(0, 2, 1).reshape(batch, channels, height, width)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, count, width = x.shape
    return x.reshape(batch, count, heads, width // heads).transpose(0, 2, 1, 3)


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """softmax(Q Kᵀ / √d_head) V, optionally split into `heads` heads.

    Accepts n×d matrices or B×n×d batches. Every output row is a convex
    combination of the rows of V (per head).

    Raises:
        DimensionError: On width, key/value count, or head-split mismatches
    """
    squeeze = q.ndim == 2
    if squeeze:
        q = q.reshape(1, *q.shape)
    if k.ndim == 2:
        k = k.reshape(1, *k.shape)
    if v.ndim == 2:
        v = v.reshape(1, *v.shape)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"Query width {q.shape[-1]} differs from key width {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    width, value_width = q.shape[-1], v.shape[-1]
    if heads < 1 or width % heads or value_width % heads:
        raise DimensionError(
            f"Widths {width}/{value_width} cannot be split into {heads} heads"
        )

    head_dim = width // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = (qh @ T.swap_last(kh)) * (1.0 / math.sqrt(head_dim))
    weights = T.softmax(logits, axis=-1)
    out = weights @ vh
    batch, _, count, _ = out.shape
    out = out.transpose(0, 2, 1, 3).reshape(batch, count, value_width)
    return out.reshape(count, value_width) if squeeze else out


class MultiHeadAttention(Module):
    """Projected multi-head attention; self-attention when `context` is None."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: int | None = None,
    ) -> None:
        if dim % heads:
            raise ConfigurationError(f"Width {dim} not divisible by {heads} heads")
        self.heads = heads
        context_dim = context_dim or dim
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(context_dim, dim, rng, bias=False)
        self.to_v = Linear(context_dim, dim, rng, bias=False)
        self.to_out = Linear(dim, dim, rng)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        out = attention_core(
            self.to_q(x), self.to_k(context), self.to_v(context), self.heads
        )
        return self.to_out(out)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 4) -> None:
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm self-attention + feed-forward block over B×n×d tokens."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TransformerDecoderLayer(Module):
    """Pre-norm decoder block: self-attention, cross-attention, feed-forward."""

    def __init__(
        self, dim: int, heads: int, rng: np.random.Generator, memory_dim: int | None = None
    ) -> None:
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng, context_dim=memory_dim)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def forward(self, x: Tensor, memory: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))
