import numpy as np
import pytest

from sdstm import autodiff as ad
from sdstm import koopman as kp
from sdstm.autodiff import Tensor
from sdstm.errors import ConfigError
from helpers import identity_codec, rotation_system, trajectory


def make_cfg(**kw):
    base = dict(segment_len=2, embed_dim=4, lookback=8, horizon=4, ridge=1e-6)
    base.update(kw)
    return kp.KoopmanConfig(**base)


class TestConfig:
    def test_rejects_indivisible_lookback(self):
        with pytest.raises(ConfigError):
            make_cfg(segment_len=3, lookback=8)

    def test_rejects_indivisible_horizon(self):
        with pytest.raises(ConfigError):
            make_cfg(segment_len=4, lookback=8, horizon=6)

    def test_rejects_single_segment(self):
        with pytest.raises(ConfigError):
            make_cfg(segment_len=8, lookback=8, horizon=8)

    def test_counts(self):
        cfg = make_cfg(segment_len=6, lookback=48, horizon=24)
        assert cfg.n_hist == 8 and cfg.n_fut == 4


class TestEncodeDecode:
    def test_two_segments_for_double_length(self):
        cfg = make_cfg(lookback=4, horizon=2, embed_dim=3)
        params = kp.init_predictor(np.random.default_rng(0), cfg, n_nodes=2, hidden=5)
        emb = kp.encode_segments(Tensor(np.zeros((4, 2))), cfg, params)
        assert emb.shape == (3, 2)

    def test_zero_input_zero_bias_encodes_to_zero(self):
        cfg = make_cfg(embed_dim=3)
        params = kp.init_predictor(np.random.default_rng(1), cfg, n_nodes=2, hidden=5)
        emb = kp.encode_segments(Tensor(np.zeros((8, 2))), cfg, params)
        np.testing.assert_allclose(emb.data, 0.0)

    def test_identity_pair_roundtrip(self):
        cfg = make_cfg(embed_dim=6, lookback=8, horizon=4, segment_len=2)
        params = identity_codec(cfg, n_nodes=3)
        x = Tensor(np.random.default_rng(2).normal(size=(8, 3)))
        emb = kp.encode_segments(x, cfg, params)
        back = kp.decode_segments(emb, cfg, params, n_nodes=3)
        assert np.abs(back.data - x.data).max() < 1e-10

    def test_indivisible_window_rejected(self):
        cfg = make_cfg()
        params = kp.init_predictor(np.random.default_rng(3), cfg, n_nodes=2, hidden=4)
        with pytest.raises(ConfigError):
            kp.encode_segments(Tensor(np.zeros((7, 2))), cfg, params)

    def test_branches_share_codec(self):
        cfg = make_cfg(embed_dim=5)
        params = kp.init_predictor(np.random.default_rng(4), cfg, n_nodes=2, hidden=6)
        x = Tensor(np.random.default_rng(5).normal(size=(8, 2)))
        # the stable and dynamic branches call the same encoder tensors, so
        # identical inputs must produce identical embeddings
        np.testing.assert_array_equal(kp.encode_segments(x, cfg, params).data,
                                      kp.encode_segments(x, cfg, params).data)


class TestStablePredict:
    def test_average_mixer_tiles_segment_mean(self):
        cfg = make_cfg(embed_dim=6, lookback=8, horizon=4, segment_len=2)
        params = identity_codec(cfg, n_nodes=3)
        x = np.random.default_rng(6).normal(size=(8, 3))
        emb = kp.encode_segments(Tensor(x), cfg, params)
        pred = kp.stable_predict(emb, params, cfg, n_nodes=3)
        # oracle: compose the three linear maps by hand
        segs = x.reshape(4, 6)
        expected = np.tile(segs.mean(axis=0), (2, 1)).reshape(4, 3)
        np.testing.assert_allclose(pred.data, expected, atol=1e-10)

    def test_zero_operator_decodes_constant(self):
        cfg = make_cfg(embed_dim=4)
        params = kp.init_predictor(np.random.default_rng(7), cfg, n_nodes=2, hidden=6)
        params.k_ts.data[:] = 0.0
        emb = kp.encode_segments(Tensor(np.random.default_rng(8).normal(size=(8, 2))),
                                 cfg, params)
        pred = kp.stable_predict(emb, params, cfg, n_nodes=2)
        seg0 = pred.data[: cfg.segment_len]
        for s in range(1, cfg.n_fut):
            np.testing.assert_allclose(
                pred.data[s * cfg.segment_len : (s + 1) * cfg.segment_len], seg0)

    def test_gradient_wrt_operator(self):
        cfg = make_cfg(embed_dim=4)
        params = kp.init_predictor(np.random.default_rng(9), cfg, n_nodes=2, hidden=6)
        x = Tensor(np.random.default_rng(10).normal(size=(8, 2)))
        target = np.random.default_rng(11).normal(size=(4, 2))

        def loss():
            emb = kp.encode_segments(x, cfg, params)
            pred = kp.stable_predict(emb, params, cfg, n_nodes=2)
            return ad.tmean((pred - target) ** 2.0)

        report = ad.finite_diff_check(loss, {"k_ts": params.k_ts})
        assert report["k_ts"] < 1e-4


class TestEdmd:
    def test_recovers_rotation_generator(self):
        rng = np.random.default_rng(12)
        k_true = rotation_system(4, rng)
        emb = trajectory(k_true, rng.normal(size=(4, 1)), 7)
        state = kp.edmd_fit(Tensor(emb), ridge=0.0)
        assert np.abs(state.k_td.data - k_true).max() < 1e-6

    def test_rollout_tracks_true_trajectory(self):
        rng = np.random.default_rng(13)
        k_true = rotation_system(4, rng)
        emb = trajectory(k_true, rng.normal(size=(4, 1)), 7)
        state = kp.edmd_fit(Tensor(emb), ridge=0.0)
        rolled = kp.dynamic_rollout(state.k_td, Tensor(emb[:, -1:]), steps=4)
        truth = trajectory(k_true, k_true @ emb[:, -1:], 4)
        assert np.abs(rolled.data - truth).max() < 1e-5

    def test_equal_columns_make_fixed_point(self):
        e = np.array([1.0, -1.0, 0.5, 1.5])[:, None]
        emb = np.repeat(e, 5, axis=1)
        state = kp.edmd_fit(Tensor(emb), ridge=1e-6)
        np.testing.assert_allclose(state.k_td.data @ e, e, atol=1e-6)

    def test_single_pair_maps_exactly(self):
        rng = np.random.default_rng(14)
        emb = rng.normal(size=(5, 2))
        state = kp.edmd_fit(Tensor(emb), ridge=0.0)
        np.testing.assert_allclose(state.k_td.data @ emb[:, :1], emb[:, 1:], atol=1e-10)

    def test_snapshot_views(self):
        emb = Tensor(np.arange(12, dtype=float).reshape(3, 4))
        state = kp.edmd_fit(emb, ridge=1e-6)
        np.testing.assert_array_equal(state.e_hist.data, emb.data[:, :3])
        np.testing.assert_array_equal(state.e_next.data, emb.data[:, 1:])


class TestRollout:
    def test_identity_repeats_last(self):
        e = Tensor(np.array([[1.0], [2.0]]))
        rolled = kp.dynamic_rollout(Tensor(np.eye(2)), e, steps=3)
        np.testing.assert_allclose(rolled.data, np.repeat(e.data, 3, axis=1))

    def test_geometric_decay(self):
        rolled = kp.dynamic_rollout(Tensor(0.5 * np.eye(2)),
                                    Tensor(np.array([[1.0], [0.0]])), steps=3)
        np.testing.assert_allclose(rolled.data, [[0.5, 0.25, 0.125], [0.0, 0.0, 0.0]])

    def test_composition(self):
        rng = np.random.default_rng(15)
        k = Tensor(rotation_system(4, rng))
        e = Tensor(rng.normal(size=(4, 1)))
        whole = kp.dynamic_rollout(k, e, steps=7)
        first = kp.dynamic_rollout(k, e, steps=3)
        second = kp.dynamic_rollout(k, first[:, -1:], steps=4)
        assert np.abs(whole.data[:, -1] - second.data[:, -1]).max() < 1e-9

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            kp.dynamic_rollout(Tensor(np.eye(2)), Tensor(np.zeros((2, 1))), steps=0)


class TestReconstruct:
    def test_exact_for_linear_embedding_dynamics(self):
        cfg = make_cfg(embed_dim=6, lookback=8, horizon=4, segment_len=2)
        params = identity_codec(cfg, n_nodes=3)
        rng = np.random.default_rng(16)
        k_true = rotation_system(6, rng)
        emb = trajectory(k_true, rng.normal(size=(6, 1)), cfg.n_hist)
        x = kp.decode_segments(Tensor(emb), cfg, params, n_nodes=3)
        enc = kp.encode_segments(x, cfg, params)
        state = kp.edmd_fit(enc, ridge=0.0)
        recon = kp.reconstruct_input(state, cfg, params, n_nodes=3)
        assert np.abs(recon.data - x.data).max() < 1e-6

    def test_zero_operator_keeps_first_column_only(self):
        cfg = make_cfg(embed_dim=6, lookback=8, horizon=4, segment_len=2)
        params = identity_codec(cfg, n_nodes=3)
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(8, 3)))
        enc = kp.encode_segments(x, cfg, params)
        state = kp.edmd_fit(enc, ridge=1e-6)
        state = kp.KoopmanState(e_d_in=state.e_d_in, e_hist=state.e_hist,
                                e_next=state.e_next, k_td=Tensor(np.zeros((6, 6))))
        recon = kp.reconstruct_input(state, cfg, params, n_nodes=3)
        np.testing.assert_allclose(recon.data[:2], x.data[:2], atol=1e-10)
        np.testing.assert_allclose(recon.data[2:], 0.0, atol=1e-12)


def test_spectral_radius():
    assert kp.spectral_radius(0.3 * np.eye(3)) == pytest.approx(0.3)
    rot = rotation_system(4, np.random.default_rng(18), lo=0.9, hi=0.9)
    assert kp.spectral_radius(rot) == pytest.approx(0.9, abs=1e-9)
