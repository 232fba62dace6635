import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rpmforecast import tensor as T
from rpmforecast.tensor import AdamState, ShapeError, Tape, Tensor, adam_step, grad_check


def grad_of(fn, *xs):
    ts = [Tensor(np.asarray(x, dtype=float), requires_grad=True) for x in xs]
    with Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax_masked(Tensor([0.0, 0.0, 0.0]), np.array([1, 1, 1], bool))
        np.testing.assert_allclose(out.data, [1 / 3] * 3)

    def test_masked_exact_zero(self):
        out = T.softmax_masked(Tensor([5.0, 5.0, -9.0]), np.array([1, 1, 0], bool))
        assert out.data.tolist() == [0.5, 0.5, 0.0]

    def test_all_masked(self):
        with pytest.raises(ValueError):
            T.softmax_masked(Tensor([1.0, 2.0]), np.array([0, 0], bool))

    @given(arrays(float, (4, 6), elements=st.floats(-50, 50)), arrays(bool, (4, 6)))
    def test_sums_to_one(self, x, mask):
        mask[:, 0] = True
        p = T.softmax_masked(Tensor(x), mask).data
        assert np.all(p[~mask] == 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


class TestOps:
    def test_bce_half(self):
        assert T.bce_loss(Tensor([0.5]), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_bce_clamps(self):
        assert np.isfinite(T.bce_loss(Tensor([0.0, 1.0]), np.array([1.0, 0.0])).item())

    def test_square_grad(self):
        (g,) = grad_of(lambda x: T.mul(x, x), 3.0)
        assert g == 6.0

    def test_sigmoid_grad(self):
        (g,) = grad_of(lambda x: T.sigmoid(x), 0.0)
        assert g == 0.25

    def test_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_nonscalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.tanh(x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_checked_mode(self):
        with pytest.raises(FloatingPointError):
            with T.checked():
                T.mul(Tensor([1e308]), Tensor([1e308]))

    @given(arrays(float, (3, 7), elements=st.floats(-100, 100)))
    def test_layer_norm_stats(self, x):
        x = x + np.linspace(0, 1, 7)  # avoid zero-variance rows
        out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
        assert np.all(np.abs(out.mean(axis=-1)) <= 1e-10)
        var = x.var(axis=-1)
        np.testing.assert_allclose(out.var(axis=-1), var / (var + 1e-5), atol=1e-6)

    def test_dropout_identity(self, rng):
        x = Tensor(rng.normal(size=10))
        assert T.dropout(x, 0.0, True, rng) is x or np.array_equal(T.dropout(x, 0.0, True, rng).data, x.data)
        assert np.array_equal(T.dropout(x, 0.5, False, rng).data, x.data)

    def test_dropout_expectation(self, rng):
        x = Tensor(np.full(100_000, 2.0))
        out = T.dropout(x, 0.2, True, rng).data
        assert abs(out.mean() - 2.0) / 2.0 < 0.02

    def test_embedding_grad(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape() as tape:
            loss = T.sum(T.embedding_lookup(table, np.array([0, 2, 2])))
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (3,), elements=st.floats(-3, 3)))
    def test_backward_linearity(self, x0):
        f = lambda x: T.sum(T.tanh(x))  # noqa: E731
        g = lambda x: T.sum(T.mul(x, x))  # noqa: E731
        (a,) = grad_of(f, x0)
        (b,) = grad_of(g, x0)
        (c,) = grad_of(lambda x: T.add(f(x), g(x)), x0)
        np.testing.assert_allclose(c, a + b, atol=1e-12)

    def test_deterministic(self, rng):
        x0 = rng.normal(size=(4, 5))
        w0 = rng.normal(size=(5, 2))
        run = lambda: grad_of(lambda x, w: T.sum(T.tanh(T.matmul(x, w))), x0, w0)  # noqa: E731
        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)


class TestAdam:
    def test_zero_grad(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        adam_step([p], [np.zeros(2)], AdamState())
        assert p.data.tolist() == [1.0, -2.0]

    def test_first_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = adam_step([p], [np.array([1.0])], AdamState())
        assert state.step == 1
        assert p.data[0] == pytest.approx(1.0 - 5e-4, rel=1e-6)

    def test_descent(self):
        # Adam moves each coordinate by at most ~lr per step, so 500 steps at the
        # default 5e-4 cannot travel 0.5; use a larger rate for the descent check.
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = AdamState(lr=1e-2)
        for _ in range(500):
            adam_step([p], [2 * p.data], state)
        assert abs(p.data[0]) < 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([Tensor(np.ones(2), requires_grad=True)], [np.ones(3)], AdamState())


class TestGradCheck:
    def test_linear_exact(self, rng):
        w = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        assert grad_check(lambda: T.sum(T.matmul(x, w)), [w]) <= 1e-9

    def _mlp(self, rng):
        w1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        x = Tensor(rng.normal(size=(6, 3)))
        y = (rng.random(6) > 0.5).astype(float)
        fn = lambda: T.bce_loss(T.reshape(T.sigmoid(T.matmul(T.tanh(T.matmul(x, w1)), w2)), (6,)), y)  # noqa: E731
        return fn, [w1, w2]

    def test_mlp(self, rng):
        fn, params = self._mlp(rng)
        assert grad_check(fn, params) <= 1e-6

    def test_corrupted_tanh_caught(self, rng, monkeypatch):
        original = T.BACKWARD["tanh"]

        def bad(ctx, g, a, out):
            (ga,) = original(ctx, g, a, out)
            return (ga * 1.5,)

        monkeypatch.setitem(T.BACKWARD, "tanh", bad)
        fn, params = self._mlp(rng)
        assert grad_check(fn, params) > 1e-2

    def test_attention_op(self, rng):
        q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        mask = np.array([[1, 1, 0], [1, 1, 1]], bool)
        w = rng.normal(size=(2, 3, 4))
        fn = lambda: T.sum(T.mul(T.multihead_attention(q, k, v, mask, 2), Tensor(w * mask[..., None])))  # noqa: E731
        assert grad_check(fn, [q, k, v]) <= 1e-6

    def test_layer_norm(self, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)))
        fn = lambda: T.sum(T.mul(T.layer_norm(x, g, b), w))  # noqa: E731
        assert grad_check(fn, [x, g, b]) <= 1e-6
