"""Tests for the autodiff tensor engine."""

from collections.abc import Callable

import numpy as np
import pytest

from vestido import tensor as T
from vestido.errors import ConfigurationError, DimensionError, NoGraphError
from vestido.tensor import Tensor

SHAPE_SEEDS = range(20)


def random_shape(rng: np.random.Generator, ndim: int, low: int = 1, high: int = 4) -> tuple:
    return tuple(int(n) for n in rng.integers(low, high + 1, size=ndim))


def leaf(rng: np.random.Generator, shape: tuple, positive: bool = False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def assert_gradients(fn: Callable[[], Tensor], inputs: list[Tensor], tol: float = 1e-5) -> None:
    """Compare backward() with central differences for every input."""
    for x in inputs:
        x.grad = None
    fn().backward()
    for x in inputs:
        numeric = T.numerical_gradient(fn, x)
        assert x.grad is not None
        assert T.relative_error(x.grad, numeric) < tol


def projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * weights).sum()


def check_op(op: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator) -> None:
    reduce = projected(op(*inputs), rng)
    assert_gradients(lambda: reduce(op(*inputs)), inputs)


@pytest.mark.usefixtures("float64")
class TestGradients:
    """Finite-difference checks of every differentiable operation."""

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_broadcast_arithmetic(self, seed: int) -> None:
        """Test add/sub/mul/div with a broadcast right operand."""
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, 3)
        a = leaf(rng, shape)
        b = leaf(rng, (1, shape[1], 1), positive=True)
        check_op(lambda x, y: (x + y) * x - x / y, [a, b], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_unary(self, seed: int) -> None:
        """Test exp, log, sqrt, power, sigmoid and silu."""
        rng = np.random.default_rng(seed)
        a = leaf(rng, random_shape(rng, 2), positive=True)
        check_op(
            lambda x: T.exp(x * 0.3) + T.log(x) + T.sqrt(x) + x**1.5 + T.sigmoid(x) + T.silu(-x),
            [a],
            rng,
        )

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_reductions_and_shapes(self, seed: int) -> None:
        """Test sum, mean, reshape, transpose, expand, getitem and concat."""
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, 3, low=2)
        a = leaf(rng, shape)
        b = leaf(rng, shape)

        def op(x: Tensor, y: Tensor) -> Tensor:
            joined = T.concat([x, y], axis=1)
            flipped = T.transpose(joined, (2, 0, 1))
            flat = T.reshape(flipped, (-1,))
            head = x[0].mean(axis=0, keepdims=True)
            return flat[:4].sum() + T.expand(head, (3, shape[2])).sum(axis=0) + flipped.sum(axis=(0, 2))[:1]

        check_op(op, [a, b], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_matmul(self, seed: int) -> None:
        """Test batched matmul with broadcast leading axes."""
        rng = np.random.default_rng(seed)
        m, k, n = random_shape(rng, 3)
        a = leaf(rng, (2, m, k))
        b = leaf(rng, (k, n))
        check_op(T.matmul, [a, b], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_conv2d(self, seed: int) -> None:
        """Test conv2d over random stride, padding and kernel size."""
        rng = np.random.default_rng(seed)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        size = int(rng.integers(1, 3)) * 2 + 1
        x = leaf(rng, (1, int(rng.integers(1, 3)), 5, 5))
        kernel = leaf(rng, (2, x.shape[1], size, size))
        check_op(lambda a, k: T.conv2d(a, k, stride, pad), [x, kernel], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_softmax_and_logsumexp(self, seed: int) -> None:
        """Test softmax and logsumexp along a random axis."""
        rng = np.random.default_rng(seed)
        a = leaf(rng, random_shape(rng, 3, low=2))
        axis = int(rng.integers(0, 3))
        check_op(lambda x: T.softmax(x, axis) + T.logsumexp(x, axis, keepdims=True), [a], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_group_norm(self, seed: int) -> None:
        """Test group_norm including its affine parameters."""
        rng = np.random.default_rng(seed)
        groups = int(rng.integers(1, 3))
        channels = groups * int(rng.integers(1, 3))
        x = leaf(rng, (2, channels, 3, 3))
        gamma = leaf(rng, (channels,))
        beta = leaf(rng, (channels,))
        check_op(lambda a, g, b: T.group_norm(a, groups, g, b), [x, gamma, beta], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_layer_norm(self, seed: int) -> None:
        """Test layer_norm including its affine parameters."""
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, 2, low=2)
        x = leaf(rng, shape)
        gamma = leaf(rng, (shape[-1],))
        beta = leaf(rng, (shape[-1],))
        check_op(T.layer_norm, [x, gamma, beta], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_resampling(self, seed: int) -> None:
        """Test nearest upsampling followed by average pooling."""
        rng = np.random.default_rng(seed)
        x = leaf(rng, (1, 2, 2, 2))
        check_op(lambda a: T.avg_pool2d(T.upsample_nearest(a, 2) * a.sum(), 2), [x], rng)

    @pytest.mark.parametrize("seed", SHAPE_SEEDS)
    def test_mse_and_clip(self, seed: int) -> None:
        """Test mse_loss and clip away from the clipping bounds."""
        rng = np.random.default_rng(seed)
        shape = random_shape(rng, 2)
        a = leaf(rng, shape)
        b = leaf(rng, shape)
        assert_gradients(lambda: T.mse_loss(T.clip(a, -10.0, 10.0), b), [a, b])


class TestEngine:
    """Tests for graph bookkeeping and precision handling."""

    def test_default_dtype_is_float32(self) -> None:
        """Test that new tensors default to float32."""
        assert T.tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context_restores(self) -> None:
        """Test that precision() switches dtype only inside the block."""
        with T.precision(np.float64):
            assert T.zeros((2,)).dtype == np.float64
        assert T.zeros((2,)).dtype == np.float32

    def test_unsupported_dtype(self) -> None:
        """Test that integer dtypes are rejected."""
        with pytest.raises(ConfigurationError):
            T.set_default_dtype(np.int32)

    def test_backward_on_constant_raises(self) -> None:
        """Test that backward() needs a recorded graph."""
        with pytest.raises(NoGraphError):
            T.tensor([1.0]).sum().backward()

    def test_no_grad_records_nothing(self) -> None:
        """Test that no_grad() produces constants."""
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with T.no_grad():
            assert not T.is_grad_enabled()
            y = (x * 2).sum()
        assert T.is_grad_enabled()
        assert y.node is None
        with pytest.raises(NoGraphError):
            y.backward()

    def test_gradients_accumulate(self) -> None:
        """Test that repeated backward() calls add up."""
        x = T.tensor([1.0, 2.0], requires_grad=True)
        (x * 3).sum().backward()
        (x * 3).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_shared_subexpression(self) -> None:
        """Test that a tensor used twice receives both contributions."""
        x = T.tensor([2.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_non_scalar_backward_needs_seed(self) -> None:
        """Test that a vector loss requires an explicit seed gradient."""
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2).backward()

    def test_numpy_scalars_defer_to_tensor(self) -> None:
        """Test that numpy scalars on the left still build tensors."""
        x = T.tensor([1.0], requires_grad=True)
        y = np.float64(2.0) * x
        assert isinstance(y, Tensor)


class TestShapeErrors:
    """Tests that shape mismatches name both shapes."""

    def test_matmul_inner_mismatch(self) -> None:
        with pytest.raises(DimensionError, match=r"\(2, 3\) @ \(4, 5\)"):
            T.matmul(T.zeros((2, 3)), T.zeros((4, 5)))

    def test_conv_channel_mismatch(self) -> None:
        with pytest.raises(DimensionError, match="channel mismatch"):
            T.conv2d(T.zeros((1, 3, 4, 4)), T.zeros((2, 2, 3, 3)))

    def test_conv_kernel_too_large(self) -> None:
        with pytest.raises(DimensionError):
            T.conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 3, 3)))

    def test_group_norm_indivisible(self) -> None:
        with pytest.raises(ConfigurationError):
            T.group_norm(T.zeros((1, 6, 2, 2)), 4, T.ones((6,)), T.zeros((6,)))

    def test_mse_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            T.mse_loss(T.zeros((2,)), T.zeros((3,)))


class TestForwardValues:
    """Spot checks of forward results."""

    def test_conv2d_is_cross_correlation(self) -> None:
        """Test that kernels are not flipped."""
        x = T.tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        kernel = T.tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))
        out = T.conv2d(x, kernel)
        np.testing.assert_allclose(out.numpy()[0, 0], [[0.0, 1.0], [3.0, 4.0]])

    def test_conv2d_output_extent(self) -> None:
        """Test floor((H + 2p - k) / s) + 1."""
        out = T.conv2d(T.zeros((2, 3, 7, 7)), T.zeros((4, 3, 3, 3)), stride=2, pad=1)
        assert out.shape == (2, 4, 4, 4)

    def test_softmax_stable_for_large_inputs(self) -> None:
        """Test that large logits do not overflow."""
        out = T.softmax(T.tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.numpy(), [[0.5, 0.5]])

    def test_group_norm_statistics(self, rng: np.random.Generator) -> None:
        """Test zero mean and unit variance per group."""
        x = T.tensor(rng.standard_normal((2, 4, 3, 3)) * 5 + 2)
        out = T.group_norm(x, 2, T.ones((4,)), T.zeros((4,))).numpy().reshape(2, 2, -1)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)
