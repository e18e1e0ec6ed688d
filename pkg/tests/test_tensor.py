"""Kernel forward values, error contracts, and gradient correctness."""

import numpy as np
import pytest

from visitrep.numerics import (
    Parameter,
    Tensor,
    clip,
    concat,
    gather_rows,
    layer_norm,
    log,
    masked_fill,
    matmul,
    max_relative_error,
    mean,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    tanh,
    transpose,
    tsum,
    uniform_init,
)


class TestForwardValues:
    def test_softmax_uniform_logits(self):
        """Equal logits give equal probabilities."""
        out = softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(5, 4, 9)) * 10)
        out = softmax(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_is_stable_for_large_logits(self):
        out = softmax(Tensor([[1000.0, 1000.0, -1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]], atol=1e-15)

    def test_masked_entries_get_zero_probability(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(6, 6)))
        mask = np.triu(np.ones((6, 6), dtype=bool), k=1)
        out = softmax(masked_fill(x, mask))
        assert (out.data[mask] == 0.0).all()
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_fully_masked_row_is_an_error(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.zeros((2, 3), dtype=bool)
        mask[1] = True
        with pytest.raises(ValueError, match="fully masked"):
            softmax(masked_fill(x, mask))

    def test_matmul_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        out = matmul(Tensor(a), Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_batched_broadcasts_rhs(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 3, 5))
        b = rng.normal(size=(5, 2))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, atol=1e-15)

    def test_layer_norm_rows_are_standardized(self):
        rng = np.random.default_rng(2)
        out = layer_norm(Tensor(rng.normal(size=(7, 16)) * 3 + 5))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)

    def test_relu_and_sigmoid_ranges(self):
        x = Tensor(np.linspace(-30, 30, 101))
        assert (relu(x).data >= 0).all()
        s = sigmoid(x).data
        assert (s > 0).all() and (s < 1).all()
        # Far outside that range float64 saturates to exactly 0/1, which is
        # why probability consumers clip before taking logs.
        assert sigmoid(Tensor([60.0])).data[0] == 1.0

    def test_concat_then_slice_round_trip(self):
        a = np.ones((2, 3))
        b = np.zeros((2, 2))
        cat = concat([Tensor(a), Tensor(b)], axis=1)
        assert cat.shape == (2, 5)
        back = slice_axis(cat, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a)

    def test_gather_rows_selects(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = gather_rows(table, [2, 0, 2])
        np.testing.assert_array_equal(out.data, table.data[[2, 0, 2]])


class TestErrorContracts:
    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_add_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_nan_input_rejected(self):
        bad = Tensor(np.zeros(3))
        bad.data[1] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            sigmoid(bad)

    def test_nonfinite_leaf_rejected(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.inf])

    def test_backward_without_graph(self):
        with pytest.raises(ValueError, match="before any forward"):
            Tensor(1.0).backward()

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            relu(x).backward()

    def test_masked_fill_wants_matching_bool_mask(self):
        x = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="boolean"):
            masked_fill(x, np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shape"):
            masked_fill(x, np.zeros((2, 3), dtype=bool))

    def test_log_rejects_non_positive(self):
        with pytest.raises(ValueError, match="non-positive"):
            log(Tensor([0.5, 0.0]))


class TestBackwardBasics:
    def test_unreached_parameter_keeps_zero_gradient(self):
        used = Parameter(np.ones((2, 2)), "used")
        unused = Parameter(np.ones((2, 2)), "unused")
        for p in (used, unused):
            p.zero_grad()
        loss = tsum(sigmoid(used))
        loss.backward()
        assert (used.grad != 0).any()
        np.testing.assert_array_equal(unused.grad, 0.0)

    def test_gradients_accumulate_across_fanout(self):
        x = Parameter(np.array([[2.0]]), "x")
        x.zero_grad()
        y = x + x  # dy/dx = 2
        tsum(y).backward()
        np.testing.assert_allclose(x.grad, [[2.0]], atol=1e-15)

    def test_forward_and_backward_are_deterministic(self):
        def run():
            rng = np.random.default_rng(123)
            w = Parameter(rng.normal(size=(4, 4)), "w")
            x = Tensor(rng.normal(size=(3, 4)))
            loss = tsum(softmax(matmul(x, w)) * Tensor(rng.normal(size=(3, 4))))
            loss.backward()
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()


def _fd_check(build, params, tol=1e-4):
    err = max_relative_error(build, params, h=1e-5)
    assert err < tol, f"max relative error {err:.3e}"


class TestKernelGradients:
    """Every kernel against central finite differences (h = 1e-5)."""

    def setup_method(self):
        self.rng = np.random.default_rng(99)

    def _param(self, *shape):
        return Parameter(self.rng.uniform(-1.0, 1.0, size=shape), "p")

    def test_matmul(self):
        a, b = self._param(3, 4), self._param(4, 2)
        _fd_check(lambda: tsum(matmul(a, b)), [a, b])

    def test_matmul_batched(self):
        a, b = self._param(2, 3, 4), self._param(4, 2)
        c = self._param(2, 2, 3)
        _fd_check(lambda: tsum(matmul(c, matmul(a, b))), [a, b, c])

    def test_add_broadcast(self):
        a, b = self._param(3, 4), self._param(1, 4)
        _fd_check(lambda: tsum(sigmoid(a + b)), [a, b])

    def test_mul_broadcast(self):
        a, b = self._param(2, 3, 4), self._param(1, 4)
        _fd_check(lambda: tsum(tanh(a * b)), [a, b])

    def test_sigmoid_tanh_relu(self):
        x = self._param(5, 3)
        _fd_check(lambda: tsum(sigmoid(x)), [x])
        _fd_check(lambda: tsum(tanh(x)), [x])
        # Keep entries away from the relu kink.
        y = Parameter(self.rng.uniform(0.2, 1.0, size=(4, 4)) * np.sign(self.rng.normal(size=(4, 4))), "y")
        _fd_check(lambda: tsum(relu(y)), [y])

    def test_softmax(self):
        x = self._param(4, 5)
        w = Tensor(self.rng.normal(size=(4, 5)))
        _fd_check(lambda: tsum(softmax(x) * w), [x])

    def test_masked_softmax(self):
        x = self._param(1, 5, 5)
        mask = np.broadcast_to(np.triu(np.ones((5, 5), dtype=bool), k=1), (1, 5, 5))
        w = Tensor(self.rng.normal(size=(1, 5, 5)))
        _fd_check(lambda: tsum(softmax(masked_fill(x, mask)) * w), [x])

    def test_layer_norm(self):
        x = self._param(3, 6)
        w = Tensor(self.rng.normal(size=(3, 6)))
        _fd_check(lambda: tsum(layer_norm(x) * w), [x])

    def test_concat(self):
        a, b = self._param(2, 3), self._param(2, 2)
        _fd_check(lambda: tsum(sigmoid(concat([a, b], axis=1))), [a, b])

    def test_mean_and_sum_axes(self):
        x = self._param(3, 4, 5)
        _fd_check(lambda: tsum(sigmoid(mean(x, axis=1))), [x])
        _fd_check(lambda: mean(x), [x])
        _fd_check(lambda: tsum(tanh(tsum(x, axis=2))), [x])

    def test_log_clip(self):
        x = Parameter(self.rng.uniform(0.1, 0.9, size=(4, 3)), "x")
        _fd_check(lambda: tsum(log(clip(x, 1e-7, 1 - 1e-7))), [x])

    def test_transpose_reshape_slice_gather(self):
        x = self._param(4, 6)
        _fd_check(lambda: tsum(sigmoid(transpose(x))), [x])
        _fd_check(lambda: tsum(tanh(reshape(x, (2, 12)))), [x])
        _fd_check(lambda: tsum(sigmoid(slice_axis(x, 1, 1, 4))), [x])
        _fd_check(lambda: tsum(tanh(gather_rows(x, [0, 2, 2, 3]))), [x])

    def test_random_composites(self):
        """Stacked pipelines of kernels, checked end to end."""
        for trial in range(5):
            rng = np.random.default_rng(1000 + trial)
            w1 = Parameter(rng.uniform(-1, 1, size=(6, 8)), "w1")
            w2 = Parameter(rng.uniform(-1, 1, size=(8, 4)), "w2")
            x = Tensor(rng.uniform(-1, 1, size=(5, 6)))
            t = Tensor(rng.uniform(0.1, 0.9, size=(5, 4)))

            def build():
                h = layer_norm(tanh(matmul(x, w1)))
                p = softmax(matmul(h, w2))
                return -mean(log(clip(p, 1e-7, 1 - 1e-7)) * t)

            _fd_check(build, [w1, w2])


class TestInit:
    def test_uniform_init_bounds_and_determinism(self):
        vals = uniform_init(np.random.default_rng(5), (100, 4), fan_in=16)
        assert np.abs(vals).max() <= 0.25
        again = uniform_init(np.random.default_rng(5), (100, 4), fan_in=16)
        assert vals.tobytes() == again.tobytes()

    def test_bad_fan_in(self):
        with pytest.raises(ValueError):
            uniform_init(np.random.default_rng(0), (2, 2), fan_in=0)
