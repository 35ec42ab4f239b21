"""Tests for AdamW and gradient clipping."""

from __future__ import annotations

import numpy as np
import pytest

from cmota._config import TrainConfig
from cmota.errors import DimensionError, NumericalError
from cmota.numerics.tensor import Tensor
from cmota.optim import AdamWState, adamw_step, clip_grad_norm, global_norm


def _params(*values: float) -> list[Tensor]:
    return [Tensor(np.array([v]), requires_grad=True, dtype=np.float64) for v in values]


class TestAdamW:
    def test_zero_gradient_zero_decay(self) -> None:
        """Zero gradients with no decay leave parameters bit-identical."""
        rng = np.random.default_rng(0)
        params = [
            Tensor(rng.normal(size=(3, 4)), requires_grad=True),
            Tensor(rng.normal(size=5), requires_grad=True),
        ]
        before = [p.data.copy() for p in params]
        state = AdamWState.zeros(params)
        config = TrainConfig(weight_decay=0.0)
        for _ in range(3):
            adamw_step(params, [np.zeros_like(p.data) for p in params], state, config)
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p.data, b)
        assert state.step == 3

    def test_two_steps_closed_form(self) -> None:
        """A single scalar follows the bias-corrected AdamW recurrence exactly."""
        config = TrainConfig(lr=0.1, weight_decay=0.01, beta1=0.9, beta2=0.95, eps=1e-8)
        (p,) = params = _params(1.0)
        state = AdamWState.zeros(params)

        b1, b2, lr, wd, eps = 0.9, 0.95, 0.1, 0.01, 1e-8

        adamw_step(params, [np.array([2.0])], state, config)
        m1, v1 = (1 - b1) * 2.0, (1 - b2) * 4.0
        p1 = 1.0 * (1 - lr * wd) - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        assert p.data[0] == pytest.approx(p1, abs=1e-12)
        assert p1 == pytest.approx(0.999 - 0.1, abs=1e-8)

        adamw_step(params, [np.array([-1.0])], state, config)
        m2 = b1 * m1 + (1 - b1) * -1.0
        v2 = b2 * v1 + (1 - b2) * 1.0
        c1, c2 = 1 - b1**2, 1 - b2**2
        p2 = p1 * (1 - lr * wd) - lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps)
        assert p.data[0] == pytest.approx(p2, abs=1e-12)
        assert state.m[0][0] == pytest.approx(m2)
        assert state.v[0][0] == pytest.approx(v2)

    def test_decay_only(self) -> None:
        """With a zero gradient the update is the multiplicative decay alone."""
        (p,) = params = _params(3.0)
        config = TrainConfig(lr=0.5, weight_decay=0.2)
        adamw_step(params, [np.zeros(1)], AdamWState.zeros(params), config)
        assert p.data[0] == 3.0 * (1 - 0.5 * 0.2)

    def test_explicit_lr_overrides_config(self) -> None:
        (p,) = params = _params(1.0)
        config = TrainConfig(weight_decay=1.0)
        adamw_step(params, [np.zeros(1)], AdamWState.zeros(params), config, lr=0.25)
        assert p.data[0] == 0.75

    def test_per_sample_rate(self) -> None:
        config = TrainConfig(lr=1e-3, lr_per_sample=1e-4, batch_size=8)
        assert config.effective_lr == pytest.approx(8e-4)
        assert TrainConfig(lr=1e-3).effective_lr == 1e-3

    def test_non_finite_update_writes_nothing(self) -> None:
        params = _params(1.0, 2.0)
        state = AdamWState.zeros(params)
        with pytest.raises(NumericalError) as excinfo:
            adamw_step(params, [np.ones(1), np.array([np.nan])], state, TrainConfig())
        assert excinfo.value.op == "adamw_step"
        assert [p.data[0] for p in params] == [1.0, 2.0]
        assert state.step == 0

    def test_shape_mismatch(self) -> None:
        params = _params(1.0)
        with pytest.raises(DimensionError):
            adamw_step(params, [np.zeros(2)], AdamWState.zeros(params), TrainConfig())
        with pytest.raises(DimensionError):
            adamw_step(params, [], AdamWState.zeros(params), TrainConfig())


class TestClipping:
    def test_global_norm(self) -> None:
        assert global_norm([np.array([3.0]), np.array([[4.0]])]) == 5.0

    def test_clips_to_max_norm(self) -> None:
        clipped, norm = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
        assert norm == 5.0
        assert global_norm(clipped) == pytest.approx(1.0, abs=1e-6)
        assert clipped[0][0] / clipped[1][0] == pytest.approx(0.75)

    def test_below_threshold_is_untouched(self) -> None:
        grads = [np.array([0.3]), np.array([0.4])]
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        assert clipped[0] is grads[0]

    def test_non_positive_threshold_disables(self) -> None:
        grads = [np.array([30.0])]
        clipped, _ = clip_grad_norm(grads, 0.0)
        assert clipped[0] is grads[0]
