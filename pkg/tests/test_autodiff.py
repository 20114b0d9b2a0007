"""Tensor engine: forward fixtures, oracles, and gradient checks."""

import numpy as np
import pytest

from splicematch import autodiff as ad
from splicematch import reference
from splicematch.autodiff import SpectralState, Tensor, gradcheck
from splicematch.errors import (DimensionError, NumericError, ParameterError)


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


class TestConv2d:
    def test_ones_kernel_sums_ones(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.data.reshape(-1).tolist() == [9.0]

    def test_rate2_ramp_hand_value(self):
        # taps land on the {0,2,4}^2 lattice of the 0..24 ramp
        x = Tensor(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5))
        out = ad.conv2d(x, Tensor(np.ones((1, 1, 3, 3))), rate=2)
        assert out.data.reshape(-1).tolist() == [108.0]

    def test_rate1_matches_direct_convolution_bitwise(self):
        # integer lattices make every partial sum exact, so equality is
        # independent of accumulation order and genuinely bitwise
        rng = np.random.default_rng(3)
        for _ in range(25):
            x = rng.integers(-4, 5, (2, 3, 8, 8)).astype(np.float64)
            w = rng.integers(-4, 5, (4, 3, 3, 3)).astype(np.float64)
            b = rng.integers(-4, 5, 4).astype(np.float64)
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 3))
            got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b),
                            stride=stride, padding=pad).data
            ref = reference.direct_conv2d(x, w, b, stride=stride, padding=pad)
            assert np.array_equal(got, ref)

    def test_rate2_matches_direct_convolution(self):
        rng = np.random.default_rng(4)
        x = rng.integers(-4, 5, (1, 2, 9, 9)).astype(np.float64)
        w = rng.integers(-4, 5, (2, 2, 3, 3)).astype(np.float64)
        got = ad.conv2d(Tensor(x), Tensor(w), rate=2, padding=2).data
        ref = reference.direct_conv2d(x, w, rate=2, padding=2)
        assert np.array_equal(got, ref)

    def test_errors(self):
        x, w = Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))
        with pytest.raises(DimensionError):
            ad.conv2d(x, w)
        with pytest.raises(ParameterError):
            ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), w, rate=0)
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), w, rate=3)


class TestPooling:
    def test_maxpool_window(self):
        out = ad.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_maxpool_tie_routes_to_first_cell(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        out = ad.maxpool2d(x, 2)
        assert out.data.reshape(-1).tolist() == [7.0]
        ad.tsum(out).backward()
        assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_maxpool_matches_window_scan(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1, 4, 4))
        got = ad.maxpool2d(Tensor(x), 2).data
        assert np.array_equal(got, reference.scan_maxpool2d(x, 2))

    def test_avgpool_values(self):
        out = ad.avgpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        assert out.data.reshape(-1).tolist() == [2.5]
        const = ad.avgpool2d(Tensor(np.full((1, 2, 4, 4), 3.25)), 2)
        assert np.all(const.data == 3.25)

    def test_avgpool_blocks_vs_bruteforce(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 256, (1, 3, 256, 256)).astype(np.float64)
        got = ad.avgpool2d(Tensor(x), 8).data
        assert got.shape == (1, 3, 32, 32)
        assert np.allclose(got, reference.block_mean(x, 8), rtol=0, atol=1e-10)

    def test_avgpool_constant_fill_inverse_preserves_mean(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 64, (1, 1, 8, 8)).astype(np.float64)
        pooled = ad.avgpool2d(Tensor(x), 2).data
        filled = np.repeat(np.repeat(pooled, 2, axis=2), 2, axis=3)
        assert filled.mean() == x.mean()

    def test_pool_errors(self):
        with pytest.raises(DimensionError):
            ad.maxpool2d(Tensor(np.ones((1, 1, 5, 4))), 2)
        with pytest.raises(ParameterError):
            ad.avgpool2d(Tensor(np.ones((1, 1, 4, 4))), 2, stride=1)


class TestBatchNorm:
    def test_constant_input_maps_to_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 5.0))
        out = ad.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                             np.zeros(3), np.ones(3), training=True)
        assert np.max(np.abs(out.data)) <= 1e-3

    def test_two_point_channel(self):
        x = np.zeros((2, 1, 1, 1))
        x[0, 0, 0, 0], x[1, 0, 0, 0] = 1.0, 3.0
        out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                             np.zeros(1), np.ones(1), training=True)
        assert np.allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-2)

    def test_affine_shift(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((8, 1, 16, 16))
        out = ad.batchnorm2d(Tensor(x), Tensor(np.full(1, 2.0)),
                             Tensor(np.full(1, 5.0)),
                             np.zeros(1), np.ones(1), training=True)
        assert abs(out.data.mean() - 5.0) < 1e-2
        assert abs(out.data.std() - 2.0) < 1e-2

    def test_running_stats_and_eval_mode(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 2, 3, 3)) * 3.0 + 1.0
        rm, rv = np.zeros(2), np.ones(2)
        ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       rm, rv, training=True)
        expected_mean = 0.1 * x.mean(axis=(0, 2, 3))
        assert np.allclose(rm, expected_mean)
        out = ad.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                             rm, rv, training=False)
        manual = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
        assert np.allclose(out.data, manual)

    def test_empty_batch_rejected(self):
        with pytest.raises(ParameterError):
            ad.batchnorm2d(Tensor(np.ones((0, 1, 2, 2))), Tensor(np.ones(1)),
                           Tensor(np.zeros(1)), np.zeros(1), np.ones(1),
                           training=True)


class TestActivationsAndSoftmax:
    def test_relu_values(self):
        out = ad.activation(Tensor([-1.0, 2.0]), "relu")
        assert out.data.tolist() == [0.0, 2.0]

    def test_leaky_values(self):
        out = ad.activation(Tensor([-1.0, 2.0]), "leakyrelu")
        assert np.allclose(out.data, [-0.2, 2.0])

    def test_gradient_at_negative_one(self):
        for kind, slope in (("relu", 0.0), ("leakyrelu", 0.2)):
            x = Tensor(np.array([-1.0]), requires_grad=True)
            ad.tsum(ad.activation(x, kind)).backward()
            assert np.allclose(x.grad, [slope])
            err = gradcheck(lambda t: ad.tsum(ad.activation(t, kind)),
                            [Tensor(np.array([-1.0]))])
            assert err < 1e-8

    def test_softmax_fixtures(self):
        logits = np.zeros((1, 2, 1, 1))
        assert np.allclose(ad.softmax_channels(Tensor(logits)).data.reshape(-1),
                           [0.5, 0.5])
        logits[0, 0] = np.log(3.0)
        out = ad.softmax_channels(Tensor(logits)).data.reshape(-1)
        assert np.allclose(out, [0.75, 0.25], atol=1e-6)

    def test_softmax_extreme_logits_stable(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 1000.0
        out = ad.softmax_channels(Tensor(logits)).data.reshape(-1)
        assert np.allclose(out, [1.0, 0.0])

    def test_softmax_partition_of_unity(self):
        rng = np.random.default_rng(0)
        out = ad.softmax_channels(rand(rng, 2, 2, 4, 4)).data
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-6
        assert out.min() > 0.0 and out.max() < 1.0


class TestLinear:
    def test_identity(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        out = ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x)

    def test_hand_value(self):
        out = ad.linear(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[6.0]]

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(7)
        x = rng.integers(-4, 5, (4, 8)).astype(np.float64)
        w = rng.integers(-4, 5, (3, 8)).astype(np.float64)
        b = rng.integers(-4, 5, 3).astype(np.float64)
        got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.array_equal(got, reference.naive_linear(x, w, b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestBilinearUpsample:
    def test_single_pixel_constant(self):
        out = ad.bilinear_upsample(Tensor(np.full((1, 1, 1), 3.5)), 5, 7)
        assert np.all(out.data == 3.5)

    def test_row_interpolation(self):
        out = ad.bilinear_upsample(Tensor(np.array([[0.0, 1.0]])), 1, 4)
        assert np.allclose(out.data, [[0.0, 1 / 3, 2 / 3, 1.0]], atol=1e-6)

    def test_source_grid_points_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 4))
        out = ad.bilinear_upsample(Tensor(x), 10, 10).data
        # scale 3: output index 3k maps exactly to input index k
        assert np.array_equal(out[:, ::3, ::3], x)

    def test_shrink_rejected(self):
        with pytest.raises(ParameterError):
            ad.bilinear_upsample(Tensor(np.ones((4, 4))), 2, 8)


class TestSpectralNormalize:
    def test_diagonal_matrix(self):
        state = SpectralState(2, np.random.default_rng(0), power_iterations=30)
        w = Tensor(np.diag([3.0, 1.0]))
        out = ad.spectral_normalize(w, state)
        assert np.allclose(out.data, np.diag([1.0, 1 / 3]), atol=1e-3)

    def test_orthonormal_unchanged(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        state = SpectralState(4, rng, power_iterations=30)
        out = ad.spectral_normalize(Tensor(q), state)
        assert np.allclose(out.data, q, atol=1e-3)

    def test_normalized_sigma_below_one(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.standard_normal((6, 10)) * 2.0)
        state = SpectralState(6, rng, power_iterations=40)
        out = ad.spectral_normalize(w, state)
        assert ad.spectral_sigma(out.data) <= 1.01

    def test_idempotent_after_convergence(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((5, 8)))
        state = SpectralState(5, rng, power_iterations=40)
        once = ad.spectral_normalize(w, state).data
        twice = ad.spectral_normalize(Tensor(once), state).data
        assert np.allclose(once, twice, atol=1e-3)

    def test_unit_norm_u_and_zero_weight_floor(self):
        rng = np.random.default_rng(4)
        state = SpectralState(3, rng)
        ad.spectral_normalize(Tensor(rng.standard_normal((3, 5))), state)
        assert abs(np.linalg.norm(state.u) - 1.0) < 1e-12
        out = ad.spectral_normalize(Tensor(np.zeros((3, 5))), state)
        assert np.all(np.isfinite(out.data))

    def test_backward_scales_by_frozen_sigma(self):
        # contract: the sigma estimate is a constant in backward
        rng = np.random.default_rng(5)
        w = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        state = SpectralState(4, rng, power_iterations=50)
        out = ad.spectral_normalize(w, state)
        sigma = ad.spectral_sigma(w.data)
        cot = rng.standard_normal(out.data.shape)
        ad.tsum(ad.mul(out, Tensor(cot))).backward()
        assert np.allclose(w.grad, cot / sigma, atol=1e-6)


class TestTapeAndChecks:
    def test_backward_visits_reverse_order_and_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(x, x)            # x^2
        z = ad.add(ad.mul(y, 3.0), x)   # 3x^2 + x
        z.backward()
        assert np.allclose(x.grad, [13.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ParameterError):
            ad.mul(x, 2.0).backward()

    def test_nan_detection(self):
        with pytest.raises(NumericError):
            ad.log(Tensor(np.array([-1.0])))

    def test_finite_check_toggle(self):
        ad.set_finite_checks(False)
        try:
            out = ad.log(Tensor(np.array([-1.0])))
            assert np.isnan(out.data[0])
        finally:
            ad.set_finite_checks(True)

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, 2.0)
        assert y._backward_fn is None and not y.requires_grad

    def test_detach(self):
        x = Tensor(np.ones(3), requires_grad=True)
        d = ad.mul(x, 2.0).detach()
        assert not d.requires_grad

    def test_float32_graph_stays_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = ad.add(ad.mul(x, 2.0), 1.0)
        assert y.data.dtype == np.float32
        ad.tsum(y).backward()
        assert x.grad.dtype == np.float32


class TestGradcheck:
    def test_square_at_three(self):
        x = Tensor(np.array([3.0]))
        err = gradcheck(lambda t: ad.tsum(ad.mul(t, t)), [x])
        assert err < 1e-8

    def test_requires_float64(self):
        with pytest.raises(ParameterError):
            gradcheck(lambda t: ad.tsum(t), [Tensor(np.ones(2, dtype=np.float32))])

    def test_requires_scalar(self):
        with pytest.raises(ParameterError):
            gradcheck(lambda t: t, [Tensor(np.ones(2))])

    def test_conv_rate2_small(self):
        rng = np.random.default_rng(11)
        cot = Tensor(rng.standard_normal((1, 1, 6, 6)))
        err = gradcheck(
            lambda a, b: ad.tsum(ad.mul(ad.conv2d(a, b, padding=2, rate=2), cot)),
            [rand(rng, 1, 2, 6, 6), rand(rng, 1, 2, 3, 3)])
        assert err < 1e-6
