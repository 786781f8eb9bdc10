"""Forward and gradient checks for every autodiff primitive.

Each differentiable op is compared against central finite differences
(eps 1e-4, relative tolerance 1e-4) on random inputs drawn in [-1, 1],
steering clear of kink points (relu at 0, pooling ties).
"""

import numpy as np
import pytest

from helpers import (
    check_op_gradients,
    entropy_of_rows,
    max_rel_err,
    naive_conv2d,
    naive_dense,
    numeric_grad,
)

from moes import autodiff as ad
from moes.autodiff import Tensor, grad_check, zero_grad
from moes.errors import ConfigurationError, UsageError


RNG = np.random.default_rng(20240817)


def uniform(*shape):
    return RNG.uniform(-1.0, 1.0, size=shape)


class TestConv2d:
    def test_identity_kernel(self):
        x = uniform(1, 1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_two_by_two_example(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 5.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_forward_matches_naive_oracle(self, stride, padding):
        x = uniform(2, 3, 6, 7)
        k = uniform(4, 3, 3, 3)
        b = uniform(4)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding)
        want = naive_conv2d(x, k, b, stride=stride, padding=padding)
        assert max_rel_err(out.data, want) <= 1e-10

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
    def test_gradients(self, stride, padding):
        x = uniform(2, 2, 5, 5)
        k = uniform(3, 2, 3, 3)
        b = uniform(3)
        check_op_gradients(
            lambda xx, kk, bb: ad.conv2d(xx, kk, bb, stride=stride, padding=padding),
            [x, k, b],
        )

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.conv2d(Tensor(uniform(1, 2, 4, 4)), Tensor(uniform(1, 3, 3, 3)), Tensor(np.zeros(1)))


class TestMaxPool2d:
    def test_constant_input(self):
        x = np.full((1, 1, 4, 4), 0.7)
        out = ad.maxpool2d(Tensor(x), window=2, stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.7))

    def test_forced_max(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = ad.maxpool2d(Tensor(x), window=2, stride=2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_gradient_routes_to_argmax(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        t = Tensor(x, requires_grad=True)
        ad.maxpool2d(t, window=2, stride=2).sum().backward()
        np.testing.assert_array_equal(t.grad, [[[[0.0, 0.0], [0.0, 1.0]]]])

    def test_tie_routes_to_first_in_scan_order(self):
        x = np.array([[[[2.0, 2.0], [2.0, 2.0]]]])
        t = Tensor(x, requires_grad=True)
        ad.maxpool2d(t, window=2, stride=2).sum().backward()
        np.testing.assert_array_equal(t.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    @pytest.mark.parametrize("window,stride", [(2, 2), (2, 1), (3, 2)])
    def test_gradients_without_ties(self, window, stride):
        # distinct values guarantee no pooling ties
        x = RNG.permutation(np.linspace(-1, 1, 2 * 2 * 6 * 6)).reshape(2, 2, 6, 6)
        check_op_gradients(
            lambda xx: ad.maxpool2d(xx, window=window, stride=stride), [x]
        )

    def test_same_pad_preserves_extent_for_stride_one(self):
        x = uniform(1, 1, 5, 5)
        out = ad.maxpool2d(Tensor(x), window=2, stride=1, same_pad=True)
        assert out.shape == (1, 1, 5, 5)

    def test_oversized_window_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.maxpool2d(Tensor(uniform(1, 1, 2, 2)), window=3, stride=1)


class TestDense:
    def test_identity(self):
        x = uniform(3, 4)
        out = ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_example(self):
        out = ad.dense(
            Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5])
        )
        assert out.item() == 3.5

    def test_forward_matches_naive_oracle(self):
        x, w, b = uniform(3, 5), uniform(5, 4), uniform(4)
        out = ad.dense(Tensor(x), Tensor(w), Tensor(b))
        assert max_rel_err(out.data, naive_dense(x, w, b)) <= 1e-10

    def test_gradients(self):
        check_op_gradients(ad.dense, [uniform(3, 5), uniform(5, 4), uniform(4)])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.dense(Tensor(uniform(2, 3)), Tensor(uniform(4, 2)), Tensor(np.zeros(2)))


class TestRelu:
    def test_all_negative_goes_to_zero(self):
        out = ad.relu(Tensor(-np.abs(uniform(3, 3)) - 0.1))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_basic_values(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.data.tolist() == [0.0, 0.0, 2.0]

    def test_gradients_away_from_kink(self):
        x = uniform(4, 4)
        x[np.abs(x) < 0.05] = 0.1
        check_op_gradients(ad.relu, [x])


class TestConcatChannels:
    def test_single_input_unchanged(self):
        x = uniform(2, 3, 4, 4)
        out = ad.concat_channels([Tensor(x)])
        np.testing.assert_array_equal(out.data, x)

    def test_two_maps_slice_back(self):
        a, b = uniform(1, 1, 3, 3), uniform(1, 1, 3, 3)
        out = ad.concat_channels([Tensor(a), Tensor(b)])
        assert out.shape == (1, 2, 3, 3)
        np.testing.assert_array_equal(out.data[:, :1], a)
        np.testing.assert_array_equal(out.data[:, 1:], b)

    def test_backward_splits_gradient(self):
        arrays = [uniform(2, 2, 3, 3), uniform(2, 3, 3, 3)]
        check_op_gradients(lambda a, b: ad.concat_channels([a, b]), arrays)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.concat_channels([Tensor(uniform(1, 1, 3, 3)), Tensor(uniform(1, 1, 4, 4))])


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        out = ad.upsample_bilinear(Tensor(np.ones((1, 1, 2, 3))), 7, 9)
        np.testing.assert_allclose(out.data, 1.0, atol=0)

    def test_row_interpolation_example(self):
        out = ad.upsample_bilinear(Tensor([[0.0, 1.0]]), 1, 3)
        np.testing.assert_allclose(out.data, [[0.0, 0.5, 1.0]], atol=1e-15)

    def test_gradients(self):
        check_op_gradients(lambda x: ad.upsample_bilinear(x, 5, 6), [uniform(2, 2, 3)])

    def test_downscale_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.upsample_bilinear(Tensor(uniform(4, 4)), 2, 6)


class TestSoftmaxTempered:
    def test_uniform_logits(self):
        for tau in (0.3, 1.0, 7.0):
            out = ad.softmax_tempered(Tensor([[0.0, 0.0, 0.0]]), tau)
            np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_two_class_value(self):
        out = ad.softmax_tempered(Tensor([[1.0, 0.0]]), 1.0)
        np.testing.assert_allclose(
            out.data, [[0.7310585786300049, 0.2689414213699951]], atol=1e-12
        )

    def test_huge_temperature_flattens(self):
        out = ad.softmax_tempered(Tensor([[10.0, 0.0]]), 1e9)
        assert np.max(np.abs(out.data - 0.5)) < 1e-8

    def test_rows_sum_to_one_and_shift_invariance(self):
        logits = RNG.normal(0, 50, size=(40, 6))
        for tau in (0.1, 1.0, 10.0, 100.0):
            p = ad.softmax_tempered(Tensor(logits), tau).data
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
            shifted = ad.softmax_tempered(Tensor(logits + 123.456), tau).data
            np.testing.assert_allclose(p, shifted, atol=1e-12)

    def test_entropy_monotone_in_temperature(self):
        logits = RNG.normal(0, 3, size=(25, 5))
        taus = [0.1, 1.0, 10.0, 100.0]
        ents = [
            entropy_of_rows(ad.softmax_tempered(Tensor(logits), t).data) for t in taus
        ]
        for lo, hi in zip(ents, ents[1:]):
            assert np.all(hi - lo >= -1e-12)

    def test_gradients(self):
        # project through fixed weights: the plain sum of a softmax row is
        # constant, so its gradient would be degenerate
        logits = RNG.normal(0, 1, size=(3, 4))
        weights = RNG.normal(0, 1, size=(3, 4))
        for tau in (0.5, 1.0, 10.0):
            check_op_gradients(
                lambda z: ad.softmax_tempered(z, tau) * weights, [logits]
            )

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ConfigurationError):
            ad.softmax_tempered(Tensor([[1.0, 2.0]]), 0.0)


class TestElementwiseAndReductions:
    def test_arithmetic_gradients(self):
        a, b = uniform(3, 4), uniform(3, 4) + 2.0  # keep divisor away from 0
        check_op_gradients(lambda x, y: x * y + x / y - y, [a, b])

    def test_broadcast_gradients(self):
        a, b = uniform(2, 3, 4), uniform(3, 1) + 2.0
        check_op_gradients(lambda x, y: (x * y).sum(axis=0) + y, [a, b])

    def test_pow_and_log_gradients(self):
        x = np.abs(uniform(3, 3)) + 0.5
        check_op_gradients(lambda t: ad.log(t) + t**3, [x])

    def test_mean_and_axis_sum(self):
        x = uniform(2, 3, 4)
        t = Tensor(x, requires_grad=True)
        t.mean(axis=(1, 2)).sum().backward()
        np.testing.assert_allclose(t.grad, np.full_like(x, 1.0 / 12.0), atol=1e-15)

    def test_sample_max_first_argmax(self):
        x = np.array([[1.0, 5.0, 5.0], [2.0, 0.0, 1.0]])
        t = Tensor(x, requires_grad=True)
        out = ad.sample_max(t)
        np.testing.assert_array_equal(out.data, [[5.0], [2.0]])
        out.sum().backward()
        np.testing.assert_array_equal(t.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_clamp_min_blocks_gradient_in_clamped_region(self):
        t = Tensor([[0.5, -0.5]], requires_grad=True)
        ad.clamp_min(t, 0.0).sum().backward()
        np.testing.assert_array_equal(t.grad, [[1.0, 0.0]])

    def test_avgpool_gradients(self):
        check_op_gradients(lambda x: ad.avgpool2d(x, 2), [uniform(2, 2, 4, 6)])


class TestBackwardContract:
    def test_sum_of_parameter_gives_ones(self):
        p = Tensor(uniform(3, 3), requires_grad=True)
        p.sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((3, 3)))

    def test_non_scalar_loss_rejected(self):
        p = Tensor(uniform(2, 2), requires_grad=True)
        with pytest.raises(UsageError):
            (p * 2.0).backward()

    def test_gradients_accumulate_until_zeroed(self):
        p = Tensor(uniform(4), requires_grad=True)
        (p * 3.0).sum().backward()
        (p * 3.0).sum().backward()
        np.testing.assert_allclose(p.grad, 6.0, atol=1e-15)
        zero_grad([p])
        assert p.grad is None

    def test_diamond_graph_visits_each_node_once(self):
        p = Tensor([2.0], requires_grad=True)
        shared = p * 3.0
        out = (shared + shared * shared).sum()  # 3p + 9p^2 -> d/dp = 3 + 18p
        out.backward()
        np.testing.assert_allclose(p.grad, [3.0 + 18.0 * 2.0], atol=1e-12)

    def test_forward_and_backward_stay_finite(self):
        x = uniform(2, 2, 6, 6)
        k = uniform(3, 2, 3, 3)
        t = Tensor(k, requires_grad=True)
        out = ad.maxpool2d(ad.relu(ad.conv2d(Tensor(x), t, Tensor(uniform(3)), padding=1)), 2, 2)
        loss = (out * out).sum()
        loss.backward()
        assert np.isfinite(out.data).all()
        assert np.isfinite(t.grad).all()


class TestGradCheck:
    def test_linear_model_is_exact(self):
        w = Tensor(uniform(4), requires_grad=True, name="w")
        x = uniform(4)

        report = grad_check(lambda: (Tensor(x) * w).sum(), [w], epsilon=1e-4)
        assert report.max_rel_err <= 1e-8

    def test_flags_broken_layer(self):
        w = Tensor(uniform(3), requires_grad=True, name="w")

        def broken(a):
            out = ad.mul(a, a)
            if out._backward is not None:
                inner = out._backward
                out._backward = lambda g: tuple(
                    None if gg is None else gg * 1.5 for gg in inner(g)
                )
            return out

        report = grad_check(lambda: broken(w).sum(), [w], epsilon=1e-4)
        assert report.failures(1e-3), "corrupted backward must be flagged"

    def test_epsilon_bounds(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigurationError):
            grad_check(lambda: w.sum(), [w], epsilon=0.5)

    def test_subset_probing(self):
        w = Tensor(uniform(100), requires_grad=True, name="w")
        report = grad_check(
            lambda: (w * w).sum(),
            [w],
            epsilon=1e-4,
            max_entries_per_param=10,
            rng=np.random.default_rng(1),
        )
        assert report.entries[0].checked == 10
        assert report.max_rel_err <= 1e-6
