import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdstm import autodiff as ad
from sdstm import wavelet as wv
from sdstm.autodiff import Tensor


def random_gate(seed=0, n_nodes=None):
    return wv.init_gate(np.random.default_rng(seed), n_nodes=n_nodes)


class TestFilterBank:
    def test_lowpass_taps_sum_to_sqrt2(self):
        assert wv.DB4_LO.sum() == pytest.approx(np.sqrt(2.0), abs=1e-12)

    def test_highpass_taps_sum_to_zero(self):
        assert abs(wv.DB4_HI.sum()) < 1e-12

    def test_quadrature_orthonormality(self):
        h = wv.DB4_LO
        assert np.dot(h, h) == pytest.approx(1.0, abs=1e-12)
        for m in (1, 2, 3):
            assert abs(np.dot(h[: -2 * m], h[2 * m :])) < 1e-12

    def test_highpass_orthogonal_to_lowpass(self):
        h, g = wv.DB4_LO, wv.DB4_HI
        for m in (-3, -2, -1, 0, 1, 2, 3):
            lag = 2 * m
            lo = h[max(0, -lag) : len(h) - max(0, lag)]
            hi = g[max(0, lag) : len(g) - max(0, -lag)]
            assert abs(np.dot(lo, hi)) < 1e-12

    def test_level_matrix_orthogonal(self):
        for n in (8, 16, 48):
            w = wv.level_matrix(n)
            np.testing.assert_allclose(w @ w.T, np.eye(n), atol=1e-12)


class TestTransform:
    def test_constant_one_level(self):
        c = 3.7
        coeffs = wv.dwt(Tensor(np.full((8, 2), c)), levels=1)
        np.testing.assert_allclose(coeffs.approx.data, c * np.sqrt(2.0), atol=1e-12)
        np.testing.assert_allclose(coeffs.details[0].data, 0.0, atol=1e-12)

    def test_roundtrip_random_window(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(64, 3)))
        back = wv.idwt(wv.dwt(x, levels=4))
        assert np.abs(back.data - x.data).max() < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(t=st.integers(8, 144), levels=st.integers(1, 4), seed=st.integers(0, 10 ** 6))
    def test_roundtrip_property(self, t, levels, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(t, 2)))
        back = wv.idwt(wv.dwt(x, levels))
        assert np.abs(back.data - x.data).max() < 1e-8

    def test_cascade_lengths_for_length_48(self):
        # padding rule takes 48 -> 64 for four levels; the dyadic cascade of 64
        # gives detail lengths 32/16/8/4 and a length-4 approximation
        coeffs = wv.dwt(Tensor(np.zeros((48, 1))), levels=4)
        assert [d.shape[0] for d in coeffs.details] == [32, 16, 8, 4]
        assert coeffs.approx.shape[0] == 4
        assert coeffs.original_length == 48

    def test_rejects_window_shorter_than_filter(self):
        with pytest.raises(ValueError):
            wv.dwt(Tensor(np.zeros((7, 1))), levels=1)

    def test_rejects_bad_levels(self):
        with pytest.raises(ValueError):
            wv.dwt(Tensor(np.zeros((16, 1))), levels=0)


class TestLowpass:
    def test_constant_passes_through(self):
        x = Tensor(np.full((32, 2), -1.25))
        low = wv.lowpass_reconstruct(wv.dwt(x, levels=3))
        assert np.abs(low.data - x.data).max() < 1e-8

    def test_alternating_signal_is_rejected(self):
        # oracle: explicit projection onto the span of the lowpass analysis rows
        x = (np.arange(64) % 2 * 2.0 - 1.0)[:, None]
        coeffs = wv.dwt(Tensor(x), levels=1)
        low = wv.lowpass_reconstruct(coeffs)
        w = wv.level_matrix(64)
        basis = w[:32]
        projection = basis.T @ (basis @ x)
        assert np.abs(low.data).max() < 1e-6
        np.testing.assert_allclose(low.data, projection, atol=1e-10)

    def test_lowpass_plus_details_is_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(40, 2)))
        coeffs = wv.dwt(x, levels=3)
        low = wv.lowpass_reconstruct(coeffs)
        zero_approx = wv.WaveletCoeffs(
            approx=Tensor(np.zeros_like(coeffs.approx.data)),
            details=coeffs.details, levels=coeffs.levels,
            original_length=coeffs.original_length, pad_left=coeffs.pad_left)
        detail_only = wv.idwt(zero_approx)
        full = wv.idwt(coeffs)
        assert np.abs(low.data + detail_only.data - full.data).max() < 1e-8


class TestGatedDecompose:
    def test_constant_window_gives_zero_dynamic(self):
        pair = wv.gated_decompose(Tensor(np.full((32, 3), 2.5)), random_gate(), levels=4)
        assert np.abs(pair.x_td.data).max() < 1e-12
        np.testing.assert_allclose(pair.x_ts.data, 2.5, atol=1e-12)

    def test_saturated_gate_reduces_to_hard_split(self):
        gate = random_gate()
        gate.weight.data[:] = 0.0
        gate.bias.data = np.asarray(20.0)
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(48, 2)))
        pair = wv.gated_decompose(x, gate, levels=4)
        assert pair.gamma.data.min() > 1.0 - 1e-6
        np.testing.assert_allclose(pair.x_td.data, x.data - pair.x_low.data, atol=1e-6)
        np.testing.assert_allclose(pair.x_ts.data, pair.x_low.data, atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(t=st.integers(16, 96), seed=st.integers(0, 10 ** 6))
    def test_additivity_bit_exact(self, t, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(t, 3)))
        pair = wv.gated_decompose(x, random_gate(seed), levels=3)
        # x_ts is defined as x - x_td; the recomposition holds to machine
        # precision (a single rounding of the subtraction per entry)
        np.testing.assert_array_equal(pair.x_ts.data, x.data - pair.x_td.data)
        tol = 4 * np.finfo(np.float64).eps * max(1.0, np.abs(x.data).max())
        assert np.abs(pair.x_ts.data + pair.x_td.data - x.data).max() <= tol

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_gamma_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(32, 4)))
        pair = wv.gated_decompose(x, random_gate(seed), levels=2)
        assert pair.gamma.data.min() > 0.0
        assert pair.gamma.data.max() < 1.0

    def test_per_node_gate_shapes(self):
        gate = random_gate(9, n_nodes=5)
        x = Tensor(np.random.default_rng(0).normal(size=(32, 5)))
        pair = wv.gated_decompose(x, gate, levels=2)
        assert pair.gamma.shape == (32, 5)

    def test_gradients_flow_through_gate(self):
        gate = random_gate(1)
        x = Tensor(np.random.default_rng(2).normal(size=(16, 3)))

        def loss():
            pair = wv.gated_decompose(x, gate, levels=2)
            return ad.tsum(pair.x_td * pair.x_td)

        report = ad.finite_diff_check(loss, {"w": gate.weight, "b": gate.bias})
        assert max(report.values()) < 1e-4


class TestDegreeOfVariation:
    def test_linear_ramp_has_zero_spread(self):
        ramp = 0.01 * np.arange(120, dtype=float)[:, None]
        stable, dynamic = wv.degree_of_variation(ramp, np.zeros_like(ramp), period=30)
        assert stable == pytest.approx(0.0, abs=1e-12)
        assert dynamic == pytest.approx(0.0, abs=1e-12)

    def test_noise_exceeds_smooth_trend(self):
        rng = np.random.default_rng(11)
        t = np.linspace(0.0, 3.0, 600)
        trend = np.sin(t)[:, None]
        noise = rng.normal(size=(600, 1))
        stable, dynamic = wv.degree_of_variation(trend, noise, period=100)
        assert dynamic > stable

    def test_zero_components(self):
        z = np.zeros((64, 2))
        assert wv.degree_of_variation(z, z, period=16) == (0.0, 0.0)

    def test_rejects_single_period(self):
        z = np.zeros((40, 1))
        with pytest.raises(ValueError):
            wv.degree_of_variation(z, z, period=30)
