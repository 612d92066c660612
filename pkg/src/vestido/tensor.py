"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a row-major numpy buffer. Operations on tensors that require
gradients record a `Node` holding the inputs and a closure computing the
vector-Jacobian product; `Tensor.backward()` walks the recorded graph in
reverse topological order and accumulates gradients into every leaf that
requires them.

Two precisions are supported: float32 (the default, used for training and
sampling) and float64 (used by gradient-check suites), selected with the
`precision()` context manager. Convolutions use the cross-correlation
convention (kernels are not flipped).
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vestido.errors import ConfigurationError, DimensionError, NoGraphError

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Array | None]]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _EngineState:
    """Process-wide engine switches (gradient recording and default dtype)."""

    grad_enabled: bool = True
    default_dtype: np.dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    """Return the dtype used for newly created tensors."""
    return _EngineState.default_dtype


def set_default_dtype(dtype: Any) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    resolved = np.dtype(dtype)
    if resolved not in _SUPPORTED_DTYPES:
        raise ConfigurationError(f"Unsupported tensor dtype: {resolved}")
    _EngineState.default_dtype = resolved


@contextlib.contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily change the default dtype."""
    previous = _EngineState.default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _EngineState.default_dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = _EngineState.grad_enabled
    _EngineState.grad_enabled = False
    try:
        yield
    finally:
        _EngineState.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _EngineState.grad_enabled


@dataclass(eq=False)
class Node:
    """One recorded operation in the autodiff graph.

    Attributes:
        inputs: Tensors the operation consumed
        backward: Maps the output gradient to one gradient per input
        op: Operation name, for debugging
    """

    inputs: tuple[Tensor, ...]
    backward: BackwardFn
    op: str


class Tensor:
    """A dense numeric array with an optional gradient record.

    Args:
        data: Anything numpy can turn into an array
        requires_grad: Whether gradients should be accumulated into `grad`
        dtype: Element type; defaults to the engine's default dtype
    """

    # Make numpy defer binary operators to the reflected Tensor methods.
    __array_ufunc__ = None

    def __init__(
        self, data: Any, requires_grad: bool = False, dtype: Any = None
    ) -> None:
        self.data: Array = np.asarray(
            data, dtype=get_default_dtype() if dtype is None else dtype
        )
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, data: Array) -> Tensor:
        """Wrap an array without dtype conversion."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.node = None
        return out

    # --- Introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        """Return the underlying buffer (do not mutate it)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs one element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Return a constant tensor sharing this tensor's data."""
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        """Reset the accumulated gradient to zeros."""
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- Autodiff ---

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's `grad`.

        Repeated calls without resetting gradients add up.

        Raises:
            NoGraphError: If this tensor was not produced by a recorded operation
            DimensionError: If no seed gradient is given for a non-scalar tensor
        """
        if self.node is None:
            raise NoGraphError(
                "backward() called on a tensor with no autodiff graph "
                "(constant, or created under no_grad())"
            )
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)

        pending: dict[int, Array] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for tensor in reversed(_topological_order(self)):
            g = pending.pop(id(tensor), None)
            if g is None:
                continue
            if tensor.node is None:
                g = g.astype(tensor.dtype, copy=False)
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
                continue
            input_grads = tensor.node.backward(g)
            for inp, inp_grad in zip(tensor.node.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                inp_grad = _unbroadcast(inp_grad, inp.shape)
                key = id(inp)
                pending[key] = inp_grad if key not in pending else pending[key] + inp_grad

    # --- Operator sugar ---

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(_lift(other, self), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(_lift(other, self), self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(_lift(other, self), self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(_lift(other, self), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)


def _lift(value: Any, like: Tensor) -> Tensor:
    """Turn a scalar or array into a constant tensor matching `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    """Return graph tensors so that every tensor follows all of its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for inp in tensor.node.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


def _result(data: Array, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward, op)
    return out


# --- Construction helpers ---


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    """Create a tensor in the default dtype."""
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)


def randn(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Standard-normal constant drawn from `rng`."""
    return Tensor(rng.standard_normal(tuple(shape)))


# --- Elementwise arithmetic ---


def add(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    return _result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def div(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    return _result(
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _result(
        a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow"
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; the gradient is zero where clamping happened."""
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the networks."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


# --- Shape manipulation ---


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast to `shape` (materialized); gradients are summed back."""
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g,), "expand")


def swap_last(a: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index: Any) -> Tensor:
    def backward(g: Array) -> tuple[Array]:
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        raise DimensionError("concat() needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat"
    )


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    resolved = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        resolved.append(ax % ndim)
    return tuple(resolved)


def reduce_sum(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


# --- Linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with broadcast leading axes.

    Raises:
        DimensionError: If the inner extents or batch extents disagree
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(
            f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}"
        ) from e

    def backward(g: Array) -> tuple[Array, Array]:
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of a B×C×H×W input with an O×C×kh×kw kernel.

    Output extents are floor((H + 2·pad − kh) / stride) + 1 (same for W).

    Raises:
        DimensionError: On channel mismatch or a kernel larger than the padded input
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d needs B×C×H×W input and O×C×kh×kw kernel, got {x.shape}, {kernel.shape}"
        )
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = kernel.shape
    if channels != kernel_channels:
        raise DimensionError(
            f"conv2d channel mismatch: input has {channels}, kernel expects {kernel_channels}"
        )
    padded_h, padded_w = height + 2 * pad, width + 2 * pad
    if kh > padded_h or kw > padded_w:
        raise DimensionError(
            f"conv2d kernel {kh}×{kw} larger than padded input {padded_h}×{padded_w}"
        )
    out_h = (padded_h - kh) // stride + 1
    out_w = (padded_w - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # B, Ho, Wo, C, kh, kw -> rows of the im2col matrix
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, -1)
    weight = kernel.data.reshape(out_channels, -1)
    out = (cols @ weight.T).reshape(batch, out_h, out_w, out_channels)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g: Array) -> tuple[Array, Array]:
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        g_kernel = (g_rows.T @ cols).reshape(kernel.shape)
        g_cols = (g_rows @ weight).reshape(batch, out_h, out_w, channels, kh, kw)
        g_padded = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                g_padded[
                    :,
                    :,
                    i : i + stride * (out_h - 1) + 1 : stride,
                    j : j + stride * (out_w - 1) + 1 : stride,
                ] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        g_input = g_padded[:, :, pad : pad + height, pad : pad + width] if pad else g_padded
        return g_input, g_kernel

    return _result(out, (x, kernel), backward, "conv2d")


# --- Normalizers ---


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (the per-slice maximum is subtracted first)."""
    (ax,) = _normalize_axes(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g: Array) -> tuple[Array]:
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    (ax,) = _normalize_axes(axis, x.ndim)
    peak = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - peak)
    total = e.sum(axis=ax, keepdims=True)
    out = peak + np.log(total)
    weights = e / total

    def backward(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * weights,)

    return _result(out if keepdims else out.squeeze(ax), (x,), backward, "logsumexp")


def _normalize_backward(xhat: Array, inv_std: Array, g_xhat: Array) -> Array:
    """Gradient through (x − mean) / std along the last axis."""
    return inv_std * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
    )


def group_norm(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Normalize each (batch, channel-group) slice to zero mean, unit variance.

    Raises:
        ConfigurationError: If the channel count is not divisible by `groups`
        DimensionError: If gamma/beta do not have one entry per channel
    """
    if eps <= 0:
        raise ConfigurationError(f"group_norm eps must be positive, got {eps}")
    if x.ndim < 2:
        raise DimensionError(f"group_norm needs B×C×..., got {x.shape}")
    batch, channels = x.shape[:2]
    if groups < 1 or channels % groups:
        raise ConfigurationError(
            f"group_norm: {channels} channels not divisible into {groups} groups"
        )
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"group_norm affine shapes {gamma.shape}, {beta.shape} != ({channels},)"
        )
    grouped = x.data.reshape(batch, groups, -1)
    mu = grouped.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(grouped.var(axis=-1, keepdims=True) + eps)
    xhat_grouped = (grouped - mu) * inv_std
    xhat = xhat_grouped.reshape(x.shape)
    affine_shape = (1, channels) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(affine_shape) + beta.data.reshape(affine_shape)
    reduce_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g: Array) -> tuple[Array, Array, Array]:
        g_gamma = (g * xhat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        g_xhat = (g * gamma.data.reshape(affine_shape)).reshape(batch, groups, -1)
        g_x = _normalize_backward(xhat_grouped, inv_std, g_xhat)
        return g_x.reshape(x.shape), g_gamma, g_beta

    return _result(out, (x, gamma, beta), backward, "group_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    features = x.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} != ({features},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g: Array) -> tuple[Array, Array, Array]:
        g_xhat = g * gamma.data
        return (
            _normalize_backward(xhat, inv_std, g_xhat),
            (g * xhat).sum(axis=lead),
            g.sum(axis=lead),
        )

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# --- Resampling ---


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every pixel of a B×C×H×W map `factor` times along H and W."""
    batch, channels, height, width = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g: Array) -> tuple[Array]:
        return (g.reshape(batch, channels, height, factor, width, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest")


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping average pooling with a square window."""
    batch, channels, height, width = x.shape
    if height % size or width % size:
        raise DimensionError(f"avg_pool2d: {height}×{width} not divisible by {size}")
    blocks = x.data.reshape(batch, channels, height // size, size, width // size, size)

    def backward(g: Array) -> tuple[Array]:
        return (g.repeat(size, axis=2).repeat(size, axis=3) / (size * size),)

    return _result(blocks.mean(axis=(3, 5)), (x,), backward, "avg_pool2d")


# --- Losses ---


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if prediction.shape != target.shape:
        raise DimensionError(
            f"mse_loss shape mismatch: {prediction.shape} vs {target.shape}"
        )
    diff = prediction - target
    return (diff * diff).mean()


# --- Gradient checking ---


def numerical_gradient(
    fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5
) -> Array:
    """Central finite-difference gradient of scalar `fn()` w.r.t. `target`.

    `target.data` is perturbed in place and restored afterwards.
    """
    target.data = np.ascontiguousarray(target.data)
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(a: Array, b: Array) -> float:
    """max |a − b| / max(1, |a|, |b|), a scale-aware comparison."""
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale
