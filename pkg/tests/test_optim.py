"""Optimizer update rules and the adversarial weight schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accdat.autodiff import Parameter, Tensor
from accdat.errors import InvalidArgument, NumericError
from accdat.optim import (LambdaSchedule, OptimizerState, apply_step,
                          lambda_schedule, novograd_step, sgd_step)


def make_params(values: dict[str, np.ndarray]) -> dict[str, Parameter]:
    return {k: Parameter(k, Tensor(np.array(v, dtype=np.float64)))
            for k, v in values.items()}


class TestSgd:
    def test_zero_gradient_no_change(self):
        params = make_params({"w": [1.0, 2.0]})
        sgd_step(params, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])

    def test_basic_update(self):
        params = make_params({"w": [1.0]})
        sgd_step(params, {"w": np.array([0.5])}, 0.1)
        assert params["w"].data[0] == pytest.approx(0.95)

    def test_two_steps_equal_summed_gradients(self):
        a = make_params({"w": [1.0, -1.0]})
        b = make_params({"w": [1.0, -1.0]})
        g1, g2 = np.array([0.3, 0.1]), np.array([-0.2, 0.5])
        sgd_step(a, {"w": g1}, 0.05)
        sgd_step(a, {"w": g2}, 0.05)
        sgd_step(b, {"w": g1 + g2}, 0.05)
        np.testing.assert_allclose(a["w"].data, b["w"].data, atol=1e-15)

    def test_untouched_parameter_unchanged(self):
        params = make_params({"w": [1.0], "v": [2.0]})
        sgd_step(params, {"w": np.array([1.0])}, 0.1)
        assert params["v"].data[0] == 2.0

    def test_nan_gradient_names_parameter(self):
        params = make_params({"w": [1.0]})
        with pytest.raises(NumericError, match="w"):
            sgd_step(params, {"w": np.array([np.nan])}, 0.1)

    def test_unknown_key_rejected(self):
        params = make_params({"w": [1.0]})
        with pytest.raises(InvalidArgument):
            sgd_step(params, {"nope": np.array([1.0])}, 0.1)


class TestNovograd:
    def test_first_step_is_normalized_gradient(self):
        params = make_params({"w": [1.0, 2.0, 2.0]})
        g = np.array([3.0, 0.0, 4.0])  # norm 5
        state = OptimizerState(kind="novograd", lr=0.1, beta1=0.0,
                               weight_decay=0.0)
        novograd_step(state, params, {"w": g})
        expected = np.array([1.0, 2.0, 2.0]) - 0.1 * g / (5.0 + state.eps)
        np.testing.assert_allclose(params["w"].data, expected, atol=1e-12)

    def test_first_step_invariant_to_gradient_scale(self):
        g = np.array([0.3, -1.2, 0.7])
        updates = []
        for factor in (1.0, 10.0):
            params = make_params({"w": [1.0, 1.0, 1.0]})
            state = OptimizerState(kind="novograd", lr=0.05, weight_decay=0.0)
            novograd_step(state, params, {"w": factor * g})
            updates.append(params["w"].data - 1.0)
        np.testing.assert_allclose(updates[0], updates[1], rtol=1e-6)

    def test_zero_gradient_no_decay_no_change(self):
        params = make_params({"w": [1.0, -2.0]})
        state = OptimizerState(kind="novograd", weight_decay=0.0)
        novograd_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])

    def test_second_moment_recursion(self):
        params = make_params({"w": [0.0]})
        state = OptimizerState(kind="novograd", lr=0.0, beta2=0.5,
                               weight_decay=0.0)
        novograd_step(state, params, {"w": np.array([2.0])})
        assert state.second_moment["w"] == pytest.approx(4.0)  # first step: ||g||^2
        novograd_step(state, params, {"w": np.array([4.0])})
        assert state.second_moment["w"] == pytest.approx(0.5 * 4.0 + 0.5 * 16.0)

    def test_kind_mismatch(self):
        state = OptimizerState(kind="sgd")
        with pytest.raises(InvalidArgument):
            novograd_step(state, make_params({"w": [1.0]}),
                          {"w": np.array([1.0])})

    def test_state_copy_independent(self):
        state = OptimizerState(kind="novograd")
        params = make_params({"w": [1.0]})
        novograd_step(state, params, {"w": np.array([1.0])})
        copy = state.copy()
        copy.first_moment["w"][:] = 99.0
        assert state.first_moment["w"][0] != 99.0


class TestLambdaSchedule:
    def test_zero_at_start(self):
        assert lambda_schedule(0.0, LambdaSchedule(1.0, 10.0)) == 0.0

    def test_saturates_at_lambda_max(self):
        sched = LambdaSchedule(lambda_max=2.5, gamma=60.0)
        assert lambda_schedule(1.0, sched) == pytest.approx(2.5, rel=1e-9)

    def test_closed_form_anchor(self):
        got = lambda_schedule(0.5, LambdaSchedule(1.0, 10.0))
        assert got == pytest.approx(2 / (1 + math.exp(-5)) - 1, abs=1e-12)
        assert got == pytest.approx(0.98661, abs=1e-5)

    def test_out_of_range_progress(self):
        with pytest.raises(InvalidArgument):
            lambda_schedule(1.5, LambdaSchedule())
        with pytest.raises(InvalidArgument):
            lambda_schedule(-0.1, LambdaSchedule())

    @given(st.floats(0.1, 50.0), st.floats(0.0, 5.0))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_bounded(self, gamma, lambda_max):
        sched = LambdaSchedule(lambda_max=lambda_max, gamma=gamma)
        grid = [lambda_schedule(p, sched) for p in np.linspace(0, 1, 101)]
        assert grid[0] == 0.0
        assert all(b >= a for a, b in zip(grid, grid[1:]))
        assert all(0 <= v <= lambda_max + 1e-12 for v in grid)


def test_apply_step_dispatch():
    params = make_params({"w": [1.0]})
    apply_step(OptimizerState(kind="sgd", lr=0.5), params,
               {"w": np.array([1.0])})
    assert params["w"].data[0] == pytest.approx(0.5)
    with pytest.raises(InvalidArgument):
        apply_step(OptimizerState(kind="adam"), params, {})
