import numpy as np
import pytest

from idensenet import autodiff as ad
from idensenet.autodiff import Parameter, Tape
from idensenet.optim import Adam, AdamState, OptimizerStateError, adam_step


def reference_adam(x, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar textbook recurrence, one gradient per step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return x


class TestAdamStep:
    def test_zero_grad_leaves_parameter(self):
        p = Parameter([1.5, -2.0], name="p")
        state = AdamState.init([p])
        adam_step([p], state)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_moves_by_lr(self):
        p = Parameter([0.0], name="p")
        p.grad[...] = 1.0
        state = AdamState.init([p], lr=0.001)
        adam_step([p], state)
        assert p.data[0] == pytest.approx(-0.001, rel=1e-6)

    def test_grads_untouched(self, rng):
        p = Parameter(rng.normal(size=3), name="p")
        g = rng.normal(size=3)
        p.grad[...] = g
        adam_step([p], AdamState.init([p]))
        np.testing.assert_array_equal(p.grad, g)

    def test_matches_scalar_recurrence(self, rng):
        grads = rng.normal(size=25)
        p = Parameter([0.3], name="p")
        state = AdamState.init([p], lr=0.01)
        for g in grads:
            p.grad[...] = g
            adam_step([p], state)
        assert p.data[0] == pytest.approx(reference_adam(0.3, grads, lr=0.01), rel=1e-12)
        assert state.step == 25

    def test_uninitialised_state(self):
        p = Parameter([1.0], name="p")
        with pytest.raises(OptimizerStateError):
            adam_step([p], AdamState())

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            AdamState.init([Parameter([1.0], name="a"), Parameter([2.0], name="a")])

    def test_moments_match_shapes(self, rng):
        ps = [Parameter(rng.normal(size=s), name=str(i)) for i, s in enumerate([(2, 3), (4,), (1,)])]
        state = AdamState.init(ps)
        for p in ps:
            assert state.m[p.name].shape == p.shape == state.v[p.name].shape


class TestAdamWrapper:
    def _run(self, seed):
        rng = np.random.default_rng(seed)
        w = Parameter(rng.normal(size=(2, 3)), name="w")
        x = rng.normal(size=(10, 3))
        y = rng.normal(size=(10, 2))
        opt = Adam([w], lr=0.05)
        for _ in range(50):
            opt.zero_grad()
            with Tape():
                r = ad.matmul(x, ad.transpose(w)) - y
                loss = ad.mean(r * r)
            ad.backward(loss)
            opt.step()
        return w.data, float(loss.data)

    def test_deterministic(self):
        a, _ = self._run(3)
        b, _ = self._run(3)
        np.testing.assert_array_equal(a, b)

    def test_reduces_least_squares_loss(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=(2, 3))
        x = rng.normal(size=(10, 3))
        y = rng.normal(size=(10, 2))
        start = np.mean((x @ w0.T - y) ** 2)
        _, final = self._run(3)
        assert final < 0.5 * start
