"""Dense network forward/backward and Adam against independent oracles."""

import numpy as np
import pytest

from latmix import nn
from latmix.errors import ShapeError, ValidationError


def scalar_loop_forward(params, x):
    """Re-evaluate the affine/tanh chain with explicit Python loops."""
    h = list(x)
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for o in range(w.shape[0]):
            s = b[o]
            for i in range(w.shape[1]):
                s += w[o, i] * h[i]
            out.append(s if k == last else np.tanh(s))
        h = out
    return np.array(h)


class TestForward:
    def test_identity_single_layer(self):
        params = nn.MlpParams((np.eye(2),), (np.zeros(2),))
        out, _ = nn.mlp_forward(params, np.array([3.0, -2.0]))
        np.testing.assert_allclose(out, [3.0, -2.0])

    def test_tanh_zero(self):
        params = nn.MlpParams((np.array([[1.0]]), np.array([[2.0]])),
                              (np.zeros(1), np.zeros(1)))
        out, _ = nn.mlp_forward(params, np.array([0.0]))
        assert out[0] == 0.0

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        params = nn.init_mlp([3, 5, 2], rng)
        x = rng.standard_normal(3)
        out, _ = nn.mlp_forward(params, x)
        np.testing.assert_allclose(out, scalar_loop_forward(params, x), atol=1e-12)

    def test_batched_matches_rowwise(self):
        rng = np.random.default_rng(8)
        params = nn.init_mlp([4, 6, 3], rng)
        xb = rng.standard_normal((5, 4))
        out, _ = nn.mlp_forward(params, xb)
        for i in range(5):
            row, _ = nn.mlp_forward(params, xb[i])
            np.testing.assert_allclose(out[i], row, atol=1e-14)

    def test_shape_error(self):
        params = nn.MlpParams((np.eye(2),), (np.zeros(2),))
        with pytest.raises(ShapeError):
            nn.mlp_forward(params, np.zeros(3))

    def test_nonfinite_input(self):
        params = nn.MlpParams((np.eye(2),), (np.zeros(2),))
        with pytest.raises(ValidationError):
            nn.mlp_forward(params, np.array([np.nan, 0.0]))

    def test_determinism(self):
        rng1 = np.random.default_rng(42)
        rng2 = np.random.default_rng(42)
        p1 = nn.init_mlp([3, 4, 2], rng1)
        p2 = nn.init_mlp([3, 4, 2], rng2)
        x = np.array([0.1, -0.2, 0.3])
        o1, _ = nn.mlp_forward(p1, x)
        o2, _ = nn.mlp_forward(p2, x)
        assert (o1 == o2).all()


class TestBackward:
    def test_zero_grad_output(self):
        rng = np.random.default_rng(0)
        params = nn.init_mlp([3, 4, 2], rng)
        out, tape = nn.mlp_forward(params, rng.standard_normal(3))
        grads, gin = nn.mlp_backward(params, tape, np.zeros(2))
        for a in grads.arrays():
            assert (a == 0).all()
        assert (gin == 0).all()

    def test_linear_weight_grad_is_input(self):
        params = nn.MlpParams((np.array([[0.5, -1.0, 2.0]]),), (np.zeros(1),))
        x = np.array([1.0, 2.0, 3.0])
        _, tape = nn.mlp_forward(params, x)
        grads, _ = nn.mlp_backward(params, tape, np.array([1.0]))
        np.testing.assert_allclose(grads.weights[0], x[None, :])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        params = nn.init_mlp([4, 3, 2], rng)
        x = rng.standard_normal(4)
        w_out = rng.standard_normal(2)

        out, tape = nn.mlp_forward(params, x)
        grads, gin = nn.mlp_backward(params, tape, w_out)
        fd = nn.finite_diff_grad(lambda p: float(nn.mlp_forward(p, x)[0] @ w_out),
                                 params, 1e-5)
        for a, b in zip(grads.arrays(), fd.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-8)
        # input gradient via finite differences too
        gfd = np.zeros_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = 1e-5
            fp = float(nn.mlp_forward(params, x + e)[0] @ w_out)
            fm = float(nn.mlp_forward(params, x - e)[0] @ w_out)
            gfd[j] = (fp - fm) / 2e-5
        np.testing.assert_allclose(gin, gfd, rtol=1e-5, atol=1e-8)

    def test_stale_tape_rejected(self):
        rng = np.random.default_rng(1)
        p1 = nn.init_mlp([2, 2], rng)
        p2 = nn.init_mlp([2, 2], rng)
        _, tape = nn.mlp_forward(p1, np.zeros(2))
        with pytest.raises(ValidationError):
            nn.mlp_backward(p2, tape, np.zeros(2))

    def test_gradient_exactness_sweep(self):
        """Networks up to 5 layers / 50 parameters match finite differences."""
        rng = np.random.default_rng(11)
        for sizes in ([2, 3, 2], [3, 3, 2, 1], [2, 2, 2, 2, 2]):
            params = nn.init_mlp(sizes, rng)
            assert sum(a.size for a in params.arrays()) <= 50
            x = rng.standard_normal(sizes[0])
            w_out = rng.standard_normal(sizes[-1])
            _, tape = nn.mlp_forward(params, x)
            grads, _ = nn.mlp_backward(params, tape, w_out)
            fd = nn.finite_diff_grad(lambda p: float(nn.mlp_forward(p, x)[0] @ w_out),
                                     params, 1e-5)
            for a, b in zip(grads.arrays(), fd.arrays()):
                denom = np.maximum(np.abs(b), 1e-6)
                assert (np.abs(a - b) / denom).max() < 1e-5


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        rng = np.random.default_rng(3)
        params = nn.init_mlp([2, 3, 1], rng)
        state = nn.init_adam(params)
        zero = nn.GradientBundle(tuple(np.zeros_like(w) for w in params.weights),
                                 tuple(np.zeros_like(b) for b in params.biases))
        new_params, new_state = nn.adam_step(state, params, zero)
        for a, b in zip(params.arrays(), new_params.arrays()):
            np.testing.assert_array_equal(a, b)
        assert new_state.step == 1

    def test_first_step_magnitude(self):
        params = nn.MlpParams((np.array([[0.0]]),), (np.zeros(1),))
        state = nn.init_adam(params, lr=0.001)
        grads = nn.GradientBundle((np.array([[1.0]]),), (np.zeros(1),))
        new_params, _ = nn.adam_step(state, params, grads)
        assert new_params.weights[0][0, 0] == pytest.approx(-0.001, rel=1e-6)

    def test_monotone_decrease_on_quadratic(self):
        # minimize f(w) = w^2 from w0 = 1 with lr 0.1; |w| shrinks every step
        params = nn.MlpParams((np.array([[1.0]]),), (np.zeros(1),))
        state = nn.init_adam(params, lr=0.1)
        w_hist = [1.0]
        for _ in range(10):
            w = params.weights[0][0, 0]
            grads = nn.GradientBundle((np.array([[2.0 * w]]),), (np.zeros(1),))
            params, state = nn.adam_step(state, params, grads)
            w_hist.append(abs(params.weights[0][0, 0]))
        # independently run the scalar Adam recurrence
        m = v = 0.0
        w_ref = 1.0
        refs = [1.0]
        for t in range(1, 11):
            g = 2.0 * w_ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w_ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            refs.append(abs(w_ref))
        np.testing.assert_allclose(w_hist, refs, rtol=1e-12)
        assert all(b < a for a, b in zip(w_hist, w_hist[1:]))

    def test_permutation_invariance(self):
        """Permuting parameter storage order and permuting back gives identical updates."""
        rng = np.random.default_rng(9)
        arrays = [rng.standard_normal((2, 3)), rng.standard_normal(3), rng.standard_normal((1, 2))]
        grads = [rng.standard_normal(a.shape) for a in arrays]
        state = nn.init_adam(arrays)
        fwd, _ = nn.adam_step_arrays(state, arrays, grads)
        perm = [2, 0, 1]
        state_p = nn.init_adam([arrays[i] for i in perm])
        out_p, _ = nn.adam_step_arrays(state_p, [arrays[i] for i in perm],
                                       [grads[i] for i in perm])
        back = [None] * 3
        for slot, i in enumerate(perm):
            back[i] = out_p[slot]
        for a, b in zip(fwd, back):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        params = nn.MlpParams((np.zeros((1, 1)),), (np.zeros(1),))
        state = nn.init_adam(params)
        bad = nn.GradientBundle((np.zeros((2, 1)),), (np.zeros(1),))
        with pytest.raises(ShapeError):
            nn.adam_step(state, params, bad)


class TestFiniteDiff:
    def test_quadratic(self):
        params = nn.MlpParams((np.array([[3.0]]),), (np.zeros(1),))
        fd = nn.finite_diff_grad(lambda p: float(p.weights[0][0, 0] ** 2), params, 1e-4)
        assert fd.weights[0][0, 0] == pytest.approx(6.0, abs=1e-6)

    def test_constant_function(self):
        rng = np.random.default_rng(2)
        params = nn.init_mlp([2, 2], rng)
        fd = nn.finite_diff_grad(lambda p: 1.5, params, 1e-4)
        for a in fd.arrays():
            assert (a == 0).all()

    def test_tanh_sum(self):
        params = nn.MlpParams((np.array([[0.5], [-0.5]]),), (np.zeros(2),))
        fd = nn.finite_diff_grad(
            lambda p: float(np.sum(np.tanh(p.weights[0]))), params, 1e-4)
        sech2 = 1.0 / np.cosh(0.5) ** 2
        np.testing.assert_allclose(fd.weights[0].ravel(), [sech2, sech2], atol=1e-6)

    def test_bad_step(self):
        params = nn.MlpParams((np.zeros((1, 1)),), (np.zeros(1),))
        with pytest.raises(ValidationError):
            nn.finite_diff_grad(lambda p: 0.0, params, 0.0)
