"""Tensor engine: forward semantics against naive oracles, backward wiring,
broadcasting, and domain errors. Gradient numerics live in the dedicated
finite-difference suite; here backward is only checked where the answer is
exact (linear graphs, hand-sized cases).
"""

import numpy as np
import pytest

import pyrafuse.engine as E
from pyrafuse.engine import Tensor, active_tape, backward, no_grad, reset_tape
from pyrafuse.errors import InvalidValueError, ShapeError, UsageError


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestElementwise:
    def test_add_direct(self):
        out = E.add(t64([1.0, 2.0]), t64([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_by_one_is_identity(self):
        x = t64(np.random.default_rng(0).normal(size=(3, 4)))
        out = E.mul(x, 1.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_grad_of_sum_mul_is_other_operand(self):
        rng = np.random.default_rng(1)
        a = t64(rng.normal(size=(4, 5)))
        b = t64(rng.normal(size=(4, 5)))
        loss = E.reduce_sum(E.mul(a, b))
        backward(loss)
        np.testing.assert_allclose(a.grad, b.data, rtol=0, atol=0)
        np.testing.assert_allclose(b.grad, a.data, rtol=0, atol=0)

    def test_broadcast_add_backward_sums_over_expanded_axes(self):
        a = t64(np.ones((2, 3, 4)))
        b = t64(np.ones((3, 1)))
        loss = E.reduce_sum(E.add(a, b))
        backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3, 4)))
        np.testing.assert_array_equal(b.grad, np.full((3, 1), 8.0))

    def test_incompatible_shapes_name_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            E.add(t64(np.zeros((2, 3))), t64(np.zeros(4)))

    def test_scalar_operand_sugar(self):
        x = t64([1.0, -2.0])
        out = (x * 2.0) + 1.0 - 0.5
        np.testing.assert_allclose(out.data, [2.5, -3.5])


class TestMatmul:
    def test_identity(self):
        x = t64(np.random.default_rng(2).normal(size=(3, 5)))
        out = E.matmul(t64(np.eye(3)), x)
        np.testing.assert_allclose(out.data, x.data)

    def test_direct_arithmetic(self):
        out = E.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matches_naive_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = E.matmul(t64(a), t64(b))
        np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            E.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(4)
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        loss = E.reduce_sum(E.mul(E.matmul(a, b), Tensor(w, dtype=np.float64)))
        backward(loss)
        np.testing.assert_allclose(a.grad, w @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ w, atol=1e-12)


def naive_conv2d(x, w, bias, stride, padding):
    """Direct sliding-window cross-correlation."""
    b, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((b, o, oh, ow))
    for bi in range(b):
        for oi in range(o):
            for yy in range(oh):
                for xx in range(ow):
                    patch = xp[bi, :, yy * stride:yy * stride + kh,
                               xx * stride:xx * stride + kw]
                    out[bi, oi, yy, xx] = (patch * w[oi]).sum()
            if bias is not None:
                out[bi, oi] += bias[oi]
    return out


class TestConv2d:
    def test_1x1_identity_weight(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 4))
        eye = np.eye(3).reshape(3, 3, 1, 1)
        out = E.conv2d(t64(x), t64(eye))
        np.testing.assert_allclose(out.data, x)

    def test_all_ones_3x3_padding1(self):
        x = t64(np.ones((1, 1, 3, 3)))
        w = t64(np.ones((1, 1, 3, 3)))
        out = E.conv2d(x, w, padding=1)
        np.testing.assert_array_equal(
            out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_sliding_window(self, stride, padding):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 2 + 2 * padding, 2 + 2 * padding))
        bias = rng.normal(size=4)
        out = E.conv2d(t64(x), t64(w), t64(bias), stride=stride, padding=padding)
        np.testing.assert_allclose(
            out.data, naive_conv2d(x, w, bias, stride, padding), atol=1e-12)

    def test_non_integral_extent_rejected(self):
        x = t64(np.zeros((1, 1, 5, 5)))
        w = t64(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ShapeError, match="divisible by stride"):
            E.conv2d(x, w, stride=2)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            E.conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 1, 1))))


class TestPooling:
    def test_gap_constant(self):
        out = E.global_avg_pool(t64(np.full((2, 3, 4, 5), 1.25)))
        np.testing.assert_array_equal(out.data, np.full((2, 3, 1, 1), 1.25))

    def test_gap_direct(self):
        x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert E.global_avg_pool(x).item() == 2.5

    def test_gap_backward_uniform(self):
        x = t64(np.random.default_rng(7).normal(size=(1, 2, 3, 4)))
        backward(E.reduce_sum(E.global_avg_pool(x)))
        np.testing.assert_allclose(x.grad, np.full(x.shape, 1.0 / 12.0))

    def test_channel_pool_single_channel_identity(self):
        x = t64(np.random.default_rng(8).normal(size=(2, 1, 3, 3)))
        for kind in ("avg", "max"):
            np.testing.assert_array_equal(E.channel_pool(x, kind).data, x.data)

    def test_channel_pool_direct(self):
        x = t64(np.array([1.0, 5.0, 3.0]).reshape(1, 3, 1, 1))
        assert E.channel_pool(x, "avg").item() == 3.0
        assert E.channel_pool(x, "max").item() == 5.0

    def test_channel_pool_max_backward_routes_to_argmax(self):
        x = t64(np.array([1.0, 5.0, 3.0]).reshape(1, 3, 1, 1))
        backward(E.reduce_sum(E.channel_pool(x, "max")))
        np.testing.assert_array_equal(x.grad.reshape(3), [0.0, 1.0, 0.0])

    def test_channel_pool_max_tie_break_lowest_index(self):
        x = t64(np.array([2.0, 2.0, 1.0]).reshape(1, 3, 1, 1))
        backward(E.reduce_sum(E.channel_pool(x, "max")))
        np.testing.assert_array_equal(x.grad.reshape(3), [1.0, 0.0, 0.0])

    def test_channel_pool_bad_kind(self):
        with pytest.raises(UsageError, match="avg"):
            E.channel_pool(t64(np.zeros((1, 1, 1, 1))), "median")


class TestSoftmax:
    def test_symmetry(self):
        out = E.softmax(t64([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 6))
        a = E.softmax(t64(x), axis=1).data
        b = E.softmax(t64(x + 17.3), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 7)) * 20
        out = E.softmax(t64(x), axis=1).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidValueError, match="non-finite"):
            E.softmax(t64([np.inf, 0.0]), axis=0)


def naive_bilinear(x, out_h, out_w):
    """Per-pixel half-pixel-center interpolation."""
    b, c, h, w = x.shape
    out = np.zeros((b, c, out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, oy, ox] = top * (1 - fy) + bot * fy
    return out


class TestBilinearResize:
    def test_same_size_is_bitwise_identity(self):
        x = t64(np.random.default_rng(11).normal(size=(1, 2, 5, 4)))
        out = E.bilinear_resize(x, 5, 4)
        assert (out.data == x.data).all()

    def test_constant_preserved_at_any_size(self):
        x = t64(np.full((1, 1, 3, 5), 0.7))
        for oh, ow in ((1, 1), (2, 9), (7, 3), (10, 10)):
            np.testing.assert_allclose(
                E.bilinear_resize(x, oh, ow).data, 0.7, atol=1e-12)

    def test_2x2_to_4x4_matches_per_pixel_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        out = E.bilinear_resize(t64(x), 4, 4)
        np.testing.assert_allclose(out.data, naive_bilinear(x, 4, 4), atol=1e-12)

    @pytest.mark.parametrize("oh,ow", [(3, 7), (8, 2), (5, 5), (1, 6)])
    def test_random_resizes_match_oracle(self, oh, ow):
        x = np.random.default_rng(12).normal(size=(2, 3, 5, 6))
        out = E.bilinear_resize(t64(x), oh, ow)
        np.testing.assert_allclose(out.data, naive_bilinear(x, oh, ow), atol=1e-12)

    def test_target_must_be_positive(self):
        with pytest.raises(UsageError, match="positive"):
            E.bilinear_resize(t64(np.zeros((1, 1, 2, 2))), 0, 3)


class TestMiscOps:
    def test_relu(self):
        out = E.relu(t64([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert E.sigmoid(t64([0.0])).data[0] == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = E.sigmoid(t64([-1000.0, 1000.0])).data
        assert np.isfinite(out).all()
        assert 0.0 <= out[0] < 1e-300 or out[0] == 0.0
        assert out[1] == 1.0

    def test_concat_shapes(self):
        a = t64(np.zeros((1, 2, 4, 4)))
        b = t64(np.zeros((1, 3, 4, 4)))
        assert E.concat([a, b], axis=1).shape == (1, 5, 4, 4)

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(ShapeError, match="off-axis"):
            E.concat([t64(np.zeros((1, 2, 4))), t64(np.zeros((1, 2, 5)))], axis=1)

    def test_reduce_sum_axes_and_backward(self):
        x = t64(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        out = E.reduce_sum(x, axis=(0, 2))
        np.testing.assert_array_equal(out.data, x.data.sum(axis=(0, 2)))
        backward(E.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_reduce_mean_keepdims(self):
        x = t64(np.arange(6, dtype=np.float64).reshape(2, 3))
        out = E.reduce_mean(x, axis=1, keepdims=True)
        assert out.shape == (2, 1)
        np.testing.assert_allclose(out.data, [[1.0], [4.0]])

    def test_full_reduce_gives_zero_d(self):
        x = t64(np.ones((2, 2)))
        assert E.reduce_sum(x).shape == ()

    def test_narrow_slices_and_backward_scatter(self):
        x = t64(np.arange(10, dtype=np.float64).reshape(2, 5))
        out = E.narrow(x, 1, 1, 3)
        np.testing.assert_array_equal(out.data, x.data[:, 1:4])
        backward(E.reduce_sum(out))
        expected = np.zeros((2, 5))
        expected[:, 1:4] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_narrow_out_of_bounds(self):
        with pytest.raises(ShapeError, match="out of bounds"):
            E.narrow(t64(np.zeros((2, 3))), 1, 2, 2)

    def test_reshape_rejects_bad_size(self):
        with pytest.raises(ShapeError, match="cannot reshape"):
            E.reshape(t64(np.zeros((2, 3))), (4, 2))

    def test_domain_errors(self):
        with pytest.raises(InvalidValueError):
            E.reciprocal(t64([1.0, 0.0]))
        with pytest.raises(InvalidValueError):
            E.sqrt(t64([-0.1]))
        with pytest.raises(InvalidValueError):
            E.log(t64([0.0]))

    def test_clip_forward_and_subgradient(self):
        x = t64([-2.0, 0.3, 5.0])
        out = E.clip(x, 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.3, 1.0])
        backward(E.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_clip_bad_bounds(self):
        with pytest.raises(UsageError, match="lo < hi"):
            E.clip(t64([0.0]), 1.0, 1.0)


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self):
        x = t64(np.random.default_rng(13).normal(size=(3, 4)))
        backward(E.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_disconnected_leaf_gets_no_grad(self):
        x = t64(np.ones(3))
        other = t64(np.ones(3))
        backward(E.reduce_sum(x))
        assert other.grad is None

    def test_repeated_backward_accumulates(self):
        x = t64(np.ones(4))
        loss = E.reduce_sum(E.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * first)

    def test_shared_subexpression_counted_once_per_call(self):
        # y = x + x differentiates to 2, not 4, however often x appears
        x = t64([3.0])
        loss = E.reduce_sum(E.add(x, x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError, match="scalar"):
            backward(E.mul(t64(np.ones(3)), 2.0))

    def test_no_grad_suspends_recording(self):
        reset_tape()
        x = t64(np.ones(3))
        with no_grad():
            y = E.mul(x, 2.0)
        assert len(active_tape()) == 0
        assert not y.requires_grad

    def test_requires_grad_propagates(self):
        a = t64(np.ones(3))
        b = Tensor(np.ones(3), dtype=np.float64, requires_grad=False)
        assert E.add(a, b).requires_grad
        assert not E.add(b, b).requires_grad

    def test_deterministic_forward_and_grads(self):
        def run():
            reset_tape()
            rng = np.random.default_rng(99)
            x = t64(rng.normal(size=(2, 3, 6, 6)))
            w = t64(rng.normal(size=(2, 3, 3, 3)))
            out = E.reduce_sum(E.sigmoid(E.conv2d(x, w, padding=1)))
            backward(out)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        for a, b in zip(run(), run()):
            assert (a == b).all()


class TestTensorBasics:
    def test_zero_d_tensor_stays_zero_d(self):
        assert Tensor(1.5).shape == ()

    def test_int_input_promoted_to_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_item_requires_single_element(self):
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0]).item()

    def test_detach_drops_grad_tracking(self):
        x = t64(np.ones(3))
        d = x.detach()
        assert not d.requires_grad
        d.data[0] = 5.0
        assert x.data[0] == 1.0
