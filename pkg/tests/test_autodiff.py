import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from seedcomplete.autodiff import AdamW, Tensor, no_grad, ops
from seedcomplete.autodiff.check import check_gradients


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- brute-force oracles ------------------------------------------------------

def conv_loop(x, w, b, stride, pad, dil):
    """Direct cross-correlation with explicit loops over every index."""
    nd = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd)
    ks = w.shape[2:]
    osz = [(xp.shape[2 + i] - dil * (ks[i] - 1) - 1) // stride + 1 for i in range(nd)]
    out = np.zeros((x.shape[0], w.shape[0], *osz))
    for bi in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in itertools.product(*[range(n) for n in osz]):
                acc = b[o]
                for c in range(x.shape[1]):
                    for tap in itertools.product(*[range(k) for k in ks]):
                        src = tuple(p * stride + t * dil for p, t in zip(pos, tap))
                        acc += w[(o, c) + tap] * xp[(bi, c) + src]
                out[(bi, o) + pos] = acc
    return out


class TestTensor:
    def test_backward_needs_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ValueError):
            ops.mul(x, x).backward()

    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = leaf([1.0, 2.0])
        ops.sum(ops.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_repeated_backward_accumulates(self):
        x = leaf([1.0, 2.0])
        ops.sum(ops.mul(x, x)).backward()
        ops.sum(ops.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_gradient_linearity(self, rng):
        a = rng.normal(size=(3, 4))
        x1, x2 = leaf(a), leaf(a)
        f = lambda x: ops.sum(ops.exp(x))
        g = lambda x: ops.sum(ops.mul(ops.sigmoid(x), x))
        ops.add(f(x1), g(x1)).backward()
        f(x2).backward()
        g(x2).backward()
        np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-14, atol=1e-14)

    def test_shared_subexpression_visited_once(self):
        x = leaf([3.0])
        y = ops.mul(x, x)
        z = ops.add(y, y)
        ops.sum(z).backward()
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad

    def test_retain_grad_on_intermediate(self):
        x = leaf([1.0, 2.0])
        y = ops.mul(x, 3.0).retain_grad()
        ops.sum(ops.mul(y, y)).backward()
        np.testing.assert_array_equal(y.grad, [6.0, 12.0])

    def test_no_broadcasting(self):
        with pytest.raises(ValueError, match="broadcast"):
            ops.add(leaf(np.ones((2, 3))), leaf(np.ones(3)))

    def test_bitwise_determinism(self, rng):
        a = rng.normal(size=(1, 3, 5, 5, 4))
        w = rng.normal(size=(2, 3, 3, 3, 3))
        outs = []
        for _ in range(2):
            x, k = leaf(a), leaf(w)
            y = ops.conv3d(x, k, padding=1)
            ops.sum(ops.mul(y, y)).backward()
            outs.append((y.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()))
        assert outs[0] == outs[1]


class TestConv:
    def test_ones_center_is_nine(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 5))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv2d_matches_loop(self, rng, stride, pad):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, 1), atol=1e-12)

    def test_conv2d_output_size(self):
        out = ops.conv2d(Tensor(np.zeros((1, 1, 7, 9))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 1, 4, 5)

    @pytest.mark.parametrize("stride,pad,dil", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 3, 3)])
    def test_conv3d_matches_loop(self, rng, stride, pad, dil):
        x = rng.normal(size=(1, 2, 5, 6, 4))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        b = rng.normal(size=2)
        got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, dilation=dil).data
        np.testing.assert_allclose(got, conv_loop(x, w, b, stride, pad, dil), atol=1e-12)

    def test_too_small_input_names_dimension(self):
        with pytest.raises(ValueError, match="spatial dim 1"):
            ops.conv2d(Tensor(np.zeros((1, 1, 5, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 1, 1, 1))))

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_conv1d_delta_is_identity(self, rng, axis):
        x = rng.normal(size=(1, 3, 4, 5, 6))
        for k in (1, 3, 5):
            w = np.zeros((3, 3, k))
            w[np.arange(3), np.arange(3), k // 2] = 1
            np.testing.assert_array_equal(ops.conv1d_axis(Tensor(x), Tensor(w), axis).data, x)

    def test_conv1d_matches_summation(self, rng):
        x = rng.normal(size=(1, 1, 4, 2, 2))
        w = rng.normal(size=(1, 1, 3))
        got = ops.conv1d_axis(Tensor(x), Tensor(w), "x").data
        xp = np.pad(x[0, 0], [(1, 1), (0, 0), (0, 0)])
        want = sum(w[0, 0, t] * xp[t:t + 4] for t in range(3))
        np.testing.assert_allclose(got[0, 0], want, atol=1e-12)

    def test_conv1d_rejects_even_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            ops.conv1d_axis(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 4))), "y")

    def test_conv1d_gradient(self, rng):
        x, w = leaf(rng.normal(size=(1, 2, 3, 4, 3))), leaf(rng.normal(size=(2, 2, 3)))
        r = rng.normal(size=(1, 2, 3, 4, 3))
        res = check_gradients(lambda: ops.sum(ops.mul(ops.conv1d_axis(x, w, "z"), Tensor(r))), [x, w])
        assert res.passed, res


class TestLinearAndIndexing:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_hand_sum(self):
        assert ops.linear(Tensor(np.array([2.0, 3.0])), Tensor(np.array([[1.0, 1.0]]))).data.tolist() == [5.0]

    def test_matches_naive_matmul(self, rng):
        x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        want = np.array([[sum(x[i, k] * w[j, k] for k in range(3)) + b[j] for j in range(4)] for i in range(5)])
        np.testing.assert_allclose(ops.linear(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-12)

    def test_cin_mismatch(self):
        with pytest.raises(ValueError):
            ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_gather_all_cells_is_reshape(self, rng):
        grid = rng.normal(size=(3, 2, 3, 4))
        got = ops.gather_columns(ops.reshape(Tensor(grid), (3, -1)), np.arange(24)).data
        np.testing.assert_array_equal(got, grid.reshape(3, 24))

    def test_gather_empty(self):
        assert ops.gather_columns(Tensor(np.zeros((3, 5))), np.zeros(0, np.int64)).shape == (3, 0)

    def test_gather_out_of_bounds_names_index(self):
        with pytest.raises(IndexError, match="index 9 at position 1"):
            ops.gather_columns(Tensor(np.zeros((2, 5))), np.array([0, 9]))

    def test_scatter_duplicate_then_gather_doubles(self):
        col = np.array([[1.5], [-2.0]])
        a = Tensor(np.concatenate([col, col], axis=1))
        grid = ops.scatter_columns(a, np.array([3, 3]), 5)
        np.testing.assert_array_equal(ops.gather_columns(grid, np.array([3])).data, 2 * col)

    @given(arrays(np.int64, st.integers(1, 30), elements=st.integers(0, 6)))
    def test_scatter_matches_loop(self, idx):
        cols = np.arange(2 * len(idx), dtype=np.float64).reshape(2, -1)
        want = np.zeros((2, 7))
        for i, j in enumerate(idx):
            want[:, j] += cols[:, i]
        np.testing.assert_array_equal(ops.scatter_columns(Tensor(cols), idx, 7).data, want)

    def test_concat_positional(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
        out = ops.concat([Tensor(a), Tensor(b)], axis=1).data
        assert out.shape == (2, 8)
        np.testing.assert_array_equal(out[:, :3], a)
        np.testing.assert_array_equal(out[:, 3:], b)


class TestActivations:
    def test_uniform_softmax(self):
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((4, 3))), 0).data, 0.25)

    def test_relu(self):
        assert ops.relu(Tensor(np.array([-2.0, 0.5]))).data.tolist() == [0.0, 0.5]

    @given(arrays(np.float64, (5, 4), elements=st.floats(-300, 300)))
    def test_softmax_sums_to_one(self, a):
        s = ops.softmax(Tensor(a), axis=0).data
        np.testing.assert_allclose(s.sum(0), 1.0, atol=1e-6)
        assert np.isfinite(ops.log_softmax(Tensor(a), axis=0).data).all()

    def test_axis_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax(Tensor(np.zeros((2, 2))), axis=3)

    def test_instance_norm_statistics(self, rng):
        x = rng.normal(3.0, 2.0, size=(1, 2, 4, 4, 4))
        y = ops.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(2, 3, 4)), 1, atol=1e-4)


class TestAdamW:
    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            AdamW([leaf([1.0])], lr=0.0)

    def test_zero_grad_zero_decay_unchanged(self):
        p = leaf([1.0, -2.0])
        p.grad = np.zeros(2)
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_decay_only_shrinks(self):
        p = leaf([1.0, -2.0])
        p.grad = np.zeros(2)
        AdamW([p], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=1e-15)

    def test_single_step_closed_form(self):
        lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
        p0 = np.array([0.5, -1.0, 2.0])
        g = np.array([0.3, -0.2, 0.0])
        p = leaf(p0)
        p.grad = g.copy()
        AdamW([p], lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps).step()
        m_hat = (1 - b1) * g / (1 - b1)
        v_hat = (1 - b2) * g * g / (1 - b2)
        want = p0 * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(p.data, want, rtol=1e-12)
