import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idensenet.flow import FlowModel, LinearBlock, build_model
from idensenet.inversion import (
    InversionError,
    InversionTrace,
    invert_block,
    invert_model,
    iteration_bound,
    round_trip_error,
)


class TestInvertBlock:
    def test_zero_block_one_iteration(self, rng):
        y = rng.normal(size=(4, 2))
        trace = InversionTrace()
        x = invert_block(LinearBlock(np.zeros((2, 2))), y, trace=trace)
        np.testing.assert_array_equal(x, y)
        assert trace.iterations == 1

    def test_half_linear_closed_form(self):
        trace = InversionTrace()
        x = invert_block(LinearBlock(np.array([[0.5]])), np.array([[3.0]]), tol=1e-10, trace=trace)
        assert x[0, 0] == pytest.approx(2.0, abs=1e-9)
        r = np.array(trace.residuals)
        np.testing.assert_allclose(r[1:] / r[:-1], 0.5, rtol=1e-9)

    def test_iterations_within_bound(self, rng):
        for a in (0.3, 0.7, 0.95):
            block = LinearBlock(a * np.eye(2))
            y = rng.normal(size=(5, 2))
            trace = InversionTrace()
            invert_block(block, y, tol=1e-8, max_iter=1000, trace=trace)
            assert trace.iterations <= iteration_bound(trace.residuals[0], 1e-8, a)

    def test_residuals_decrease_after_first(self, small_model, rng):
        trace = InversionTrace()
        invert_block(small_model.blocks[0], rng.normal(size=(50, 2)), tol=1e-10, trace=trace)
        r = np.array(trace.residuals)
        assert np.all(np.diff(r[1:]) <= 0)

    def test_max_iter_error_carries_residual(self):
        block = LinearBlock(np.array([[1.5]]))
        with pytest.raises(InversionError) as info:
            invert_block(block, np.array([[1.0]]), max_iter=5)
        assert info.value.iterations == 5
        assert info.value.residual > 1.0
        assert "Lip" in str(info.value)

    @pytest.mark.parametrize("kwargs", [dict(tol=0.0), dict(max_iter=0)])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(ValueError):
            invert_block(LinearBlock(np.zeros((1, 1))), np.zeros((1, 1)), **kwargs)

    def test_accepts_single_row(self):
        x = invert_block(LinearBlock(0.5 * np.eye(2)), np.array([1.5, 3.0]), tol=1e-12)
        np.testing.assert_allclose(x, [[1.0, 2.0]], atol=1e-11)


class TestInvertModel:
    def test_identity_model(self, rng):
        model = build_model(n_blocks=3, depth=1, growth=4, identity_init=True, rng=rng)
        z = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(invert_model(model, z), z)

    def test_round_trip(self, rng):
        model = build_model(n_blocks=4, depth=2, growth=16, rng=rng)
        assert round_trip_error(model, 3 * rng.normal(size=(1000, 2))) < 1e-4

    def test_round_trip_residual_baseline(self, small_residual_model, rng):
        assert round_trip_error(small_residual_model, rng.normal(size=(500, 2))) < 1e-4

    def test_error_names_block(self):
        model = FlowModel([LinearBlock(0.5 * np.eye(1)), LinearBlock(np.array([[1.2]]))], 1)
        with pytest.raises(InversionError) as info:
            invert_model(model, np.array([[1.0]]), max_iter=10)
        assert info.value.block_index == 1
        assert "block 1" in str(info.value)


class TestIterationBound:
    def test_examples(self):
        assert iteration_bound(1e-9, 1e-6, 0.5) == 1
        assert iteration_bound(1.0, 1e-6, 0.0) == 2
        # 0.5**k < 1e-6 first at k = 20, i.e. iteration 21
        assert iteration_bound(1.0, 1e-6, 0.5) == 21

    def test_invalid(self):
        with pytest.raises(ValueError):
            iteration_bound(1.0, 1e-6, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-50, 50))
def test_scalar_linear_inverse(a, y):
    x = invert_block(LinearBlock(np.array([[a]])), np.array([[y]]), tol=1e-12, max_iter=1000)
    assert x[0, 0] == pytest.approx(y / (1 + a), abs=1e-9 * max(1.0, abs(y)) / (1 - abs(a)))
    assert math.isfinite(x[0, 0])
