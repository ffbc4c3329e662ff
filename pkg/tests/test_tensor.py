import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridplan.tensor import (
    ConvKernel,
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    channel_max,
    conv2d_head,
    conv2d_same,
    extract_at,
    finite_diff_check,
    hadamard,
    leaky_relu,
    narrow_channels,
    sigmoid,
    softmax_blend,
    softmax_cross_entropy,
    softmax_probs,
    stack_channels,
    stack_rows,
    total_sum,
)

from _oracles import channel_max_loop, conv2d_loop, cross_entropy_direct


def rand_tensor(rng, dims, requires_grad=False):
    return Tensor(rng.standard_normal(dims), requires_grad=requires_grad)


class TestTensorBasics:
    def test_rejects_non_rank4(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 3)))

    def test_data_is_row_major_float64(self):
        t = Tensor(np.zeros((1, 2, 3, 4), dtype=np.float32).transpose(0, 1, 3, 2))
        assert t.data.dtype == np.float64
        assert t.data.flags["C_CONTIGUOUS"]

    def test_kernel_rejects_even_f(self):
        with pytest.raises(ShapeError):
            ConvKernel(np.zeros((1, 1, 4, 4)))

    def test_kernel_rejects_rectangular_window(self):
        with pytest.raises(ShapeError):
            ConvKernel(np.zeros((1, 1, 3, 5)))


class TestConv2dSame:
    def test_zero_input_gives_zero_output(self):
        kernel = ConvKernel(np.random.default_rng(0).standard_normal((4, 1, 3, 3)))
        out = conv2d_same(Tensor(np.zeros((1, 1, 3, 3))), kernel)
        assert out.dims == (1, 4, 3, 3)
        assert not out.data.any()

    def test_center_tap_scales_single_cell(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 5.0
        out = conv2d_same(Tensor([[[[2.0]]]]), ConvKernel(w))
        assert out.data.reshape(()) == 10.0

    def test_matches_loop_oracle_on_spec_shape(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = conv2d_same(Tensor(x), ConvKernel(w))
        np.testing.assert_allclose(out.data, conv2d_loop(x, w), rtol=0, atol=1e-12)

    def test_matches_loop_oracle_randomized(self):
        # invariant: exact to accumulated rounding for shapes up to 2x4x9x9
        rng = np.random.default_rng(7)
        for _ in range(100):
            b = int(rng.integers(1, 3))
            ci = int(rng.integers(1, 5))
            co = int(rng.integers(1, 5))
            h = int(rng.integers(1, 10))
            wd = int(rng.integers(1, 10))
            f = int(rng.choice([1, 3, 5]))
            x = rng.standard_normal((b, ci, h, wd))
            w = rng.standard_normal((co, ci, f, f))
            got = conv2d_same(Tensor(x), ConvKernel(w)).data
            want = conv2d_loop(x, w)
            scale = max(1.0, np.abs(want).max())
            assert np.abs(got - want).max() / scale < 1e-10

    def test_matches_loop_oracle_beyond_dense_limit(self):
        # spatial size large enough to exercise the im2col fallback
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 13, 12))
        w = rng.standard_normal((2, 3, 5, 5))
        out = conv2d_same(Tensor(x), ConvKernel(w))
        np.testing.assert_allclose(out.data, conv2d_loop(x, w), atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        kernel = ConvKernel(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ShapeError, match=r"(?s)\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
            conv2d_same(x, kernel)


class TestChannelMax:
    def test_picks_maximum_and_argindex(self):
        x = Tensor(np.array([1.0, 3.0, 2.0]).reshape(1, 3, 1, 1))
        out, arg = channel_max(x)
        assert out.data.reshape(()) == 3.0
        assert arg.reshape(()) == 1

    def test_tie_breaks_to_lowest_channel(self):
        x = Tensor(np.full((1, 4, 2, 2), 7.0))
        out, arg = channel_max(x)
        assert (out.data == 7.0).all()
        assert (arg == 0).all()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8, 4, 4))
        out, arg = channel_max(Tensor(x))
        want_out, want_arg = channel_max_loop(x)
        np.testing.assert_array_equal(out.data, want_out)
        np.testing.assert_array_equal(arg, want_arg)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_dominates_every_channel(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, int(rng.integers(1, 6)), 3, 3))
        out, arg = channel_max(Tensor(x))
        assert (out.data >= x).all()
        np.testing.assert_array_equal(
            out.data[:, 0], np.take_along_axis(x, arg[:, None], axis=1)[:, 0]
        )


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data.reshape(()) == 0.5

    def test_sigmoid_stays_in_open_interval(self):
        # beyond |x| ~ 36 the true value is closer to 0/1 than one float64 ulp
        x = Tensor(np.linspace(-30, 30, 32).reshape(1, 1, 4, 8))
        y = sigmoid(x).data
        assert (y > 0).all() and (y < 1).all()

    def test_leaky_relu_negative_branch(self):
        out = leaky_relu(Tensor(np.full((1, 1, 1, 1), -1.0)), slope=0.01)
        assert out.data.reshape(()) == -0.01

    def test_leaky_relu_identity_on_positive(self):
        x = np.abs(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(leaky_relu(Tensor(x)).data, x)

    def test_add_and_hadamard_require_identical_dims(self):
        a = Tensor(np.zeros((1, 1, 2, 2)))
        b = Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ShapeError):
            add(a, b)
        with pytest.raises(ShapeError):
            hadamard(a, b)

    def test_stack_channels_shape(self):
        a = Tensor(np.zeros((1, 2, 4, 5)))
        b = Tensor(np.zeros((1, 1, 4, 5)))
        assert stack_channels(a, b).dims == (1, 3, 4, 5)

    def test_stack_then_narrow_roundtrip(self):
        rng = np.random.default_rng(5)
        a = rand_tensor(rng, (2, 2, 3, 3))
        b = rand_tensor(rng, (2, 1, 3, 3))
        stacked = stack_channels(a, b)
        np.testing.assert_array_equal(narrow_channels(stacked, 0, 2).data, a.data)
        np.testing.assert_array_equal(narrow_channels(stacked, 2, 1).data, b.data)

    def test_stack_rows_concatenates_leading_axis(self):
        a = Tensor(np.ones((2, 1, 3, 3)))
        b = Tensor(np.zeros((1, 1, 3, 3)))
        out = stack_rows(a, b)
        assert out.dims == (3, 1, 3, 3)
        assert out.data[:2].all() and not out.data[2:].any()


class TestExtractAt:
    def test_gathers_channel_vectors(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 4, 5, 6))
        rows = np.array([0, 2, 4])
        cols = np.array([5, 0, 3])
        out = extract_at(Tensor(x), rows, cols)
        assert out.dims == (3, 4, 1, 1)
        for b in range(3):
            np.testing.assert_array_equal(out.data[b, :, 0, 0], x[b, :, rows[b], cols[b]])

    def test_out_of_bounds_coordinate_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError, match=r"\(4, 0\)"):
            extract_at(x, np.array([4]), np.array([0]))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_action_count(self):
        logits = Tensor(np.zeros((3, 8, 1, 1)))
        labels = np.eye(8)[[0, 3, 7]]
        loss = softmax_cross_entropy(logits, labels)
        assert loss.item() == pytest.approx(math.log(8), abs=1e-12)

    def test_saturated_margin_gives_near_zero_loss(self):
        z = np.zeros((1, 8, 1, 1))
        z[0, 2] = 100.0
        loss = softmax_cross_entropy(Tensor(z), np.eye(8)[[2]])
        assert loss.item() < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((4, 8))
        labels = rng.integers(0, 8, size=4)
        loss = softmax_cross_entropy(Tensor(z.reshape(4, 8, 1, 1)), np.eye(8)[labels])
        assert loss.item() == pytest.approx(cross_entropy_direct(z, labels), abs=1e-12)

    def test_rejects_non_one_hot_labels(self):
        logits = Tensor(np.zeros((2, 8, 1, 1)))
        bad = np.zeros((2, 8))
        bad[0, 0] = bad[0, 1] = 1.0
        bad[1, 2] = 1.0
        with pytest.raises(ValueError, match="one-hot"):
            softmax_cross_entropy(logits, bad)
        soft = np.full((2, 8), 1 / 8)
        with pytest.raises(ValueError, match="one-hot"):
            softmax_cross_entropy(logits, soft)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(13)
        probs = softmax_probs(rng.standard_normal((64, 8)) * 30)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)


class TestSoftmaxBlend:
    def test_equal_logits_give_arithmetic_mean(self):
        rng = np.random.default_rng(2)
        maps = [rand_tensor(rng, (1, 1, 3, 3)) for _ in range(4)]
        out = softmax_blend(maps, Tensor(np.zeros((4, 1, 1, 1))))
        np.testing.assert_allclose(out.data, np.mean([m.data for m in maps], axis=0),
                                   atol=1e-14)

    def test_dominant_logit_selects_its_map(self):
        rng = np.random.default_rng(4)
        maps = [rand_tensor(rng, (1, 1, 2, 2)) for _ in range(3)]
        logits = np.zeros((3, 1, 1, 1))
        logits[1] = 100.0
        out = softmax_blend(maps, Tensor(logits))
        np.testing.assert_allclose(out.data, maps[1].data, atol=1e-10)

    def test_matches_direct_weighted_sum(self):
        rng = np.random.default_rng(6)
        maps = [rand_tensor(rng, (2, 1, 3, 3)) for _ in range(5)]
        z = rng.standard_normal(5)
        weights = np.exp(z) / np.exp(z).sum()
        out = softmax_blend(maps, Tensor(z.reshape(5, 1, 1, 1)))
        want = sum(weights[i] * maps[i].data for i in range(5))
        np.testing.assert_allclose(out.data, want, atol=1e-12)


class TestBackward:
    def test_sum_gradient_is_all_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)), requires_grad=True)
        with Tape() as tape:
            loss = total_sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_channel_max_routes_gradient_to_winner_only(self):
        x = Tensor(np.array([[[[1.0]], [[5.0]], [[2.0]]]]), requires_grad=True)
        with Tape() as tape:
            out, _ = channel_max(x)
            loss = total_sum(out)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad.reshape(3), [0.0, 1.0, 0.0])

    def test_fan_out_accumulates(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        with Tape() as tape:
            loss = total_sum(add(x, x))
        backward(loss, tape)
        assert x.grad.reshape(()) == 2.0

    def test_untracked_graph_raises(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        with pytest.raises(GradientError):
            backward(x, Tape())
        with Tape() as tape:
            y = total_sum(x)
        stray = total_sum(x)  # recorded on no tape
        with pytest.raises(GradientError):
            backward(stray, tape)
        del y

    def test_replay_is_bitwise_identical(self):
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (1, 2, 6, 6), requires_grad=True)
        kernel = ConvKernel(rand_tensor(rng, (3, 2, 3, 3), requires_grad=True))
        with Tape() as tape:
            out = leaky_relu(conv2d_same(x, kernel))
            vmax, _ = channel_max(out)
            loss = total_sum(hadamard(vmax, vmax))
        backward(loss, tape)
        first = {id(t): t.grad.copy() for t in (x, kernel.weights)}
        tape.zero_grads()
        backward(loss, tape)
        for t in (x, kernel.weights):
            np.testing.assert_array_equal(first[id(t)], t.grad)


PRIMITIVE_CASES = {
    "conv2d_same": lambda rng: _conv_case(rng),
    "conv2d_same_im2col": lambda rng: _conv_case(rng, h=13, w=13),
    "conv2d_head": lambda rng: _head_case(rng),
    "channel_max": lambda rng: _unary_case(rng, lambda x: channel_max(x)[0], channels=5),
    "sigmoid": lambda rng: _unary_case(rng, sigmoid),
    "leaky_relu": lambda rng: _unary_case(rng, lambda x: leaky_relu(x, 0.01)),
    "add": lambda rng: _binary_case(rng, add),
    "hadamard": lambda rng: _binary_case(rng, hadamard),
    "stack_channels": lambda rng: _binary_case(rng, stack_channels),
    "stack_rows": lambda rng: _binary_case(rng, stack_rows),
    "narrow_channels": lambda rng: _unary_case(rng, lambda x: narrow_channels(x, 1, 2), channels=4),
    "extract_at": lambda rng: _extract_case(rng),
    "softmax_blend": lambda rng: _blend_case(rng),
    "softmax_cross_entropy": lambda rng: _ce_case(rng),
}


def _quadratic(out):
    return total_sum(hadamard(out, out))


def _conv_case(rng, h=6, w=6):
    x = rand_tensor(rng, (2, 2, h, w), requires_grad=True)
    kernel = ConvKernel(rand_tensor(rng, (3, 2, 3, 3), requires_grad=True))
    params = {"x": x, "w": kernel.weights}
    return params, lambda: _quadratic(conv2d_same(x, kernel))


def _head_case(rng):
    x = rand_tensor(rng, (2, 2, 6, 6), requires_grad=True)
    k1 = ConvKernel(rand_tensor(rng, (5, 2, 3, 3), requires_grad=True))
    k2 = ConvKernel(rand_tensor(rng, (1, 5, 1, 1), requires_grad=True))
    params = {"x": x, "w1": k1.weights, "w2": k2.weights}
    return params, lambda: _quadratic(conv2d_head(x, k1, k2, 0.01))


def _unary_case(rng, op, channels=3):
    x = rand_tensor(rng, (2, channels, 4, 4), requires_grad=True)
    return {"x": x}, lambda: _quadratic(op(x))


def _binary_case(rng, op):
    a = rand_tensor(rng, (2, 3, 4, 4), requires_grad=True)
    b = rand_tensor(rng, (2, 3, 4, 4), requires_grad=True)
    return {"a": a, "b": b}, lambda: _quadratic(op(a, b))


def _extract_case(rng):
    x = rand_tensor(rng, (3, 4, 5, 5), requires_grad=True)
    rows = rng.integers(0, 5, size=3)
    cols = rng.integers(0, 5, size=3)
    return {"x": x}, lambda: _quadratic(extract_at(x, rows, cols))


def _blend_case(rng):
    maps = [rand_tensor(rng, (2, 1, 4, 4), requires_grad=True) for _ in range(3)]
    logits = rand_tensor(rng, (3, 1, 1, 1), requires_grad=True)
    params = {f"map{i}": m for i, m in enumerate(maps)}
    params["logits"] = logits
    return params, lambda: _quadratic(softmax_blend(maps, logits))


def _ce_case(rng):
    logits = rand_tensor(rng, (4, 8, 1, 1), requires_grad=True)
    labels = np.eye(8)[rng.integers(0, 8, size=4)]
    return {"logits": logits}, lambda: softmax_cross_entropy(logits, labels)


class TestGradientFidelity:
    @pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
    def test_primitive_matches_central_differences(self, name):
        # invariant: relative error < 1e-4 with h = 1e-4 in double precision
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        params, loss_fn = PRIMITIVE_CASES[name](rng)
        report = finite_diff_check(params, loss_fn, step=1e-4, tolerance=1e-4,
                                   num_samples=80, rng=0)
        assert report.checked > 0
        assert report.passed, (name, report.failures[:3])


class TestFiniteDiffCheck:
    def test_quadratic_analytic_two_fd_close(self):
        x = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        report = finite_diff_check({"x": x}, lambda: _quadratic(x),
                                   step=1e-4, tolerance=1e-6, num_samples=1, rng=0)
        rec = report.records[0]
        assert rec.analytic == pytest.approx(2.0, abs=1e-12)
        assert abs(rec.numeric - 2.0) < 1e-6
        assert report.passed

    def test_conv_only_model_passes_at_spec_tolerance(self):
        rng = np.random.default_rng(21)
        x = rand_tensor(rng, (1, 2, 6, 6))
        k1 = ConvKernel(rand_tensor(rng, (4, 2, 3, 3), requires_grad=True))
        k2 = ConvKernel(rand_tensor(rng, (2, 4, 5, 5), requires_grad=True))
        params = {"k1": k1.weights, "k2": k2.weights}
        report = finite_diff_check(
            params, lambda: _quadratic(conv2d_same(conv2d_same(x, k1), k2)),
            step=1e-4, tolerance=1e-4, num_samples=200, rng=1)
        assert report.passed and report.skipped == 0

    def test_argmax_flip_is_skipped_not_failed(self):
        # Two channels tied at a cell: any perturbation flips the winner.
        x = Tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
        report = finite_diff_check(
            {"x": x}, lambda: total_sum(channel_max(x)[0]),
            step=1e-4, tolerance=1e-4, num_samples=2, rng=0)
        assert report.skipped >= 1
        assert not report.failures
