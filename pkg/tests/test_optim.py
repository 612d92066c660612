"""Tests for the Adam optimizer."""

import numpy as np
import pytest

from vestido import tensor as T
from vestido.errors import ConfigurationError, MissingGradientError
from vestido.nn import Parameter
from vestido.optim import Adam, AdamState, adam_step


class TestAdamState:
    """Tests for AdamState validation."""

    def test_defaults(self) -> None:
        """Test default hyperparameters."""
        state = AdamState()
        assert state.lr == 1e-4
        assert (state.beta1, state.beta2) == (0.9, 0.999)
        assert state.t == 0

    @pytest.mark.parametrize(
        "kwargs", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}]
    )
    def test_invalid_hyperparameters(self, kwargs: dict) -> None:
        """Test that out-of-range values are rejected."""
        with pytest.raises(ConfigurationError):
            AdamState(**kwargs)


class TestAdamStep:
    """Tests for adam_step."""

    @pytest.mark.usefixtures("float64")
    def test_first_step_moves_by_lr(self) -> None:
        """Test that bias correction makes the first step ±lr per element."""
        param = Parameter(np.array([1.0, -2.0, 3.0]))
        param.grad = np.array([0.5, -4.0, 1e-3])
        state = AdamState(lr=0.1, eps=1e-12)
        adam_step([("w", param)], state)
        np.testing.assert_allclose(param.data, [0.9, -1.9, 2.9], rtol=1e-8)
        assert state.t == 1

    def test_missing_gradient_names_parameter(self) -> None:
        """Test that a parameter without gradient is reported by name."""
        param = Parameter(np.zeros(2))
        with pytest.raises(MissingGradientError, match="decoder.weight"):
            adam_step([("decoder.weight", param)], AdamState())

    def test_missing_gradient_leaves_state_untouched(self) -> None:
        """Test that nothing is updated when any gradient is missing."""
        good = Parameter(np.ones(2))
        good.grad = np.ones(2)
        bad = Parameter(np.ones(2))
        state = AdamState()
        with pytest.raises(MissingGradientError):
            adam_step([("good", good), ("bad", bad)], state)
        np.testing.assert_array_equal(good.data, np.ones(2))
        assert state.t == 0

    def test_minimizes_quadratic(self) -> None:
        """Test convergence on f(w) = |w - 3|²."""
        param = Parameter(np.zeros(4))
        optimizer = Adam([("w", param)], lr=0.1)
        for _ in range(300):
            optimizer.zero_grad()
            ((param - 3.0) * (param - 3.0)).sum().backward()
            optimizer.step()
        np.testing.assert_allclose(param.data, 3.0, atol=1e-2)

    def test_preserves_dtype(self) -> None:
        """Test that float32 parameters stay float32."""
        param = Parameter(np.ones(3))
        param.grad = np.ones(3, dtype=np.float32)
        adam_step([("w", param)], AdamState())
        assert param.dtype == np.float32


class TestAdam:
    """Tests for the Adam wrapper."""

    def test_zero_grad_resets(self) -> None:
        """Test that zero_grad() zeroes every gradient."""
        param = Parameter(np.ones(2))
        (param * 2).sum().backward()
        optimizer = Adam([("w", param)])
        optimizer.zero_grad()
        np.testing.assert_array_equal(param.grad, 0.0)

    def test_state_round_trip_continues_identically(self) -> None:
        """Test that copying the state reproduces the next update exactly."""
        a = Parameter(np.array([1.0, 2.0]))
        b = Parameter(np.array([1.0, 2.0]))
        opt_a = Adam([("w", a)], lr=0.01)
        opt_b = Adam([("w", b)], lr=0.01)
        for opt, p in ((opt_a, a), (opt_b, b)):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        opt_b.state = AdamState(
            **opt_a.state.hyperparameters(),
            m={k: v.copy() for k, v in opt_a.state.m.items()},
            v={k: v.copy() for k, v in opt_a.state.v.items()},
        )
        for opt, p in ((opt_a, a), (opt_b, b)):
            opt.zero_grad()
            T.mse_loss(p, T.zeros((2,))).backward()
            opt.step()
        np.testing.assert_array_equal(a.data, b.data)
