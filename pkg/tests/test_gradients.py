"""Backward passes vs the central-difference oracle, plus optimizer checks."""

import numpy as np
import pytest

from trimodal.numerics import (
    AdamState,
    AttentionParams,
    Tensor,
    adam_step,
    clip_global_norm,
    concat,
    erf,
    exp,
    finite_diff_check,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    multi_head_attention,
    relu,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    swapaxes,
    take_rows,
    tensor,
    tsum,
)

TOL = 1e-6


def _fd(f, params, **kw):
    return finite_diff_check(f, params, **kw)


def _rand(rng, *shape):
    return tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


class TestPrimitiveBackward:
    """Every primitive matches central differences at float64 on [-2, 2]."""

    @pytest.mark.parametrize("op", [
        lambda x: mul(x, x),
        lambda x: mul(x, -1.5) + 2.0,
        lambda x: x / 3.0,
        lambda x: exp(mul(x, 0.5)),
        lambda x: sqrt(mul(x, x) + 1.0),
        lambda x: sigmoid(x),
        lambda x: gelu(x),
        lambda x: relu(x + 0.1),
        lambda x: softplus(x),
        lambda x: erf(x),
        lambda x: softmax(x, axis=-1),
        lambda x: log_softmax(x, axis=-1),
        lambda x: layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))),
        lambda x: swapaxes(x, 0, 1),
        lambda x: x[1:, :2],
    ])
    def test_elementwise_and_shape(self, rng, op):
        x = _rand(rng, 3, 4)
        ro = tensor(rng.normal(size=op(x).shape))
        err = _fd(lambda: tsum(mul(op(x), ro)), [x])
        assert err < TOL

    def test_log(self, rng):
        x = tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        err = _fd(lambda: tsum(log(x)), [x])
        assert err < TOL

    def test_matmul_broadcast(self, rng):
        a = _rand(rng, 2, 3, 4)
        b = _rand(rng, 4, 5)
        ro = tensor(rng.normal(size=(2, 3, 5)))
        err = _fd(lambda: tsum(mul(matmul(a, b), ro)), [a, b])
        assert err < TOL

    def test_matmul_batched_both(self, rng):
        a = _rand(rng, 2, 3, 4)
        b = _rand(rng, 2, 4, 3)
        err = _fd(lambda: tsum(matmul(a, b)), [a, b])
        assert err < TOL

    def test_matvec(self, rng):
        m = _rand(rng, 3, 5)
        v = _rand(rng, 5)
        err = _fd(lambda: tsum(matmul(m, v)), [m, v])
        assert err < TOL

    def test_take_rows(self, rng):
        table = _rand(rng, 6, 3)
        idx = np.array([[0, 2], [2, 5]])
        ro = tensor(rng.normal(size=(2, 2, 3)))
        err = _fd(lambda: tsum(mul(take_rows(table, idx), ro)), [table])
        assert err < TOL

    def test_concat(self, rng):
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
        ro = tensor(rng.normal(size=(4, 3)))
        err = _fd(lambda: tsum(mul(concat([a, b], axis=0), ro)), [a, b])
        assert err < TOL


class TestAttention:
    def test_single_token_is_value_projection(self, rng):
        d, heads = 8, 2
        p = AttentionParams.create(rng, d, zero_residual=False)
        x = tensor(rng.normal(size=(1, d)))
        out = multi_head_attention(x, x, x, heads, p)
        vproj = (x.data @ p.wv.data + p.bv.data)
        expect = vproj @ p.wo.data + p.bo.data
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_equal_scores_average_values(self, rng):
        d, heads = 8, 2
        p = AttentionParams.create(rng, d, zero_residual=False)
        p.wq.data = np.zeros((d, d))  # all scores equal -> uniform attention
        x = tensor(rng.normal(size=(5, d)))
        out = multi_head_attention(x, x, x, heads, p)
        vproj = x.data @ p.wv.data + p.bv.data
        expect = np.tile(vproj.mean(axis=0), (5, 1)) @ p.wo.data + p.bo.data
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_key_value_permutation_invariance(self, rng):
        d, heads = 8, 2
        p = AttentionParams.create(rng, d, zero_residual=False)
        q = tensor(rng.normal(size=(3, d)))
        kv = rng.normal(size=(6, d))
        perm = rng.permutation(6)
        a = multi_head_attention(q, tensor(kv), tensor(kv), heads, p)
        b = multi_head_attention(q, tensor(kv[perm]), tensor(kv[perm]), heads, p)
        assert np.allclose(a.data, b.data, atol=1e-12)

    def test_output_in_convex_hull_of_value_projections(self, rng):
        d, heads = 8, 4
        p = AttentionParams.create(rng, d, zero_residual=False)
        p.wo.data = np.eye(d)
        p.bo.data = np.zeros(d)
        x = tensor(rng.normal(size=(7, d)))
        out = multi_head_attention(x, x, x, heads, p).data
        vproj = x.data @ p.wv.data + p.bv.data
        dh = d // heads
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            lo = vproj[:, cols].min(axis=0) - 1e-12
            hi = vproj[:, cols].max(axis=0) + 1e-12
            assert np.all(out[:, cols] >= lo) and np.all(out[:, cols] <= hi)

    def test_width_not_divisible_raises(self, rng):
        from trimodal.numerics import ConfigurationError
        p = AttentionParams.create(rng, 8)
        x = tensor(rng.normal(size=(2, 8)))
        with pytest.raises(ConfigurationError):
            multi_head_attention(x, x, x, 3, p)

    def test_gradients(self, rng):
        d, heads = 8, 2
        p = AttentionParams.create(rng, d, zero_residual=False)
        q = _rand(rng, 4, d)
        ro = tensor(rng.normal(size=(4, d)))
        params = [q, p.wq, p.wk, p.wv, p.wo, p.bq, p.bk, p.bv, p.bo]
        err = _fd(lambda: tsum(mul(
            multi_head_attention(q, q, q, heads, p), ro)), params,
            max_coords_per_param=20, seed=5)
        assert err < TOL


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = tensor(np.array([1.0, 2.0]), requires_grad=True)
        st = AdamState(lr=0.1)
        adam_step([p], [np.zeros(2)], st)
        assert np.array_equal(p.data, [1.0, 2.0])
        assert st.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = tensor(np.array([1.0, -2.0]), requires_grad=True)
        st = AdamState(lr=0.05, eps=1e-14)
        adam_step([p], [np.array([0.3, -7.0])], st)
        delta = p.data - np.array([1.0, -2.0])
        assert np.allclose(np.abs(delta), 0.05, rtol=1e-9)

    def test_two_steps_match_hand_recursion(self):
        # oracle: direct evaluation of the Adam recurrence for f(x) = x^2
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x = 1.0
        m = v = 0.0
        expect = []
        for t in (1, 2):
            g = 2.0 * x
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            expect.append(x)

        p = tensor(np.array(1.0), requires_grad=True)
        st = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        got = []
        for _ in range(2):
            p.zero_grad()
            loss = mul(p, p)
            loss.backward()
            adam_step([p], [p.grad], st)
            got.append(float(p.data))
        assert np.allclose(got, expect, atol=1e-15)

    def test_non_finite_gradient_rejected(self):
        p = tensor(np.ones(2), requires_grad=True)
        st = AdamState()
        with pytest.raises(ValueError):
            adam_step([p], [np.array([1.0, np.nan])], st)

    def test_none_gradient_decays_moments(self):
        p = tensor(np.ones(1), requires_grad=True)
        st = AdamState(lr=0.1)
        adam_step([p], [np.array([1.0])], st)
        moved = p.data.copy()
        adam_step([p], [None], st)
        assert not np.array_equal(p.data, moved)  # momentum keeps moving
        assert st.m[0] == pytest.approx(0.9 * 0.1)

    def test_clip_global_norm(self):
        grads = [np.array([3.0]), np.array([4.0])]
        clipped, total = clip_global_norm(grads, 1.0)
        assert total == pytest.approx(5.0)
        norm = np.sqrt(sum(float(g @ g) for g in clipped))
        assert norm == pytest.approx(1.0)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        p = tensor(3.0, requires_grad=True)
        err = finite_diff_check(lambda: mul(p, p), [p])
        assert err < 1e-9

    def test_softmax_cross_entropy_composite(self, rng):
        logits = _rand(rng, 4, 5)
        onehot = np.zeros((4, 5))
        onehot[np.arange(4), rng.integers(0, 5, 4)] = 1.0

        def f():
            return mul(tsum(mul(log_softmax(logits, axis=-1), Tensor(onehot))),
                       -0.25)

        assert finite_diff_check(f, [logits]) < 1e-6

    def test_corrupt_sign_detected(self):
        p = tensor(2.0, requires_grad=True)
        err = finite_diff_check(lambda: mul(p, p), [p], corrupt_sign=True)
        assert err > 1e-4

    def test_non_finite_function_rejected(self):
        p = tensor(-1.0, requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_check(lambda: log(p), [p])
