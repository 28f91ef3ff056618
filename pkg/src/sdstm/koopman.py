"""Segment encoder/decoder and the two Koopman-space predictors.

Windows are cut into length-L segments; each segment (all nodes flattened) is
lifted into a D-dimensional embedding by a two-layer MLP encoder. The stable
branch advances embeddings with a learned operator and maps history segments
onto horizon segments through a learned temporal mixer. The dynamic branch
fits its operator fresh per window from consecutive snapshot pairs, rolls it
forward for the horizon, and reconstructs the input embeddings for the
residual that feeds the next block. Both branches share the encoder and
decoder tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, least_squares_min_norm
from .errors import ConfigError


@dataclass(frozen=True)
class KoopmanConfig:
    segment_len: int
    embed_dim: int
    lookback: int
    horizon: int
    ridge: float = 1e-6

    def __post_init__(self):
        if self.segment_len < 1 or self.embed_dim < 1:
            raise ConfigError("segment_len and embed_dim must be positive")
        if self.lookback % self.segment_len or self.horizon % self.segment_len:
            raise ConfigError(
                f"segment_len {self.segment_len} must divide lookback {self.lookback} "
                f"and horizon {self.horizon}"
            )
        if self.lookback // self.segment_len < 2:
            raise ConfigError("need at least 2 segments in the lookback for the snapshot fit")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0")

    @property
    def n_hist(self) -> int:
        return self.lookback // self.segment_len

    @property
    def n_fut(self) -> int:
        return self.horizon // self.segment_len


@dataclass
class PredictorParams:
    enc_w1: Tensor   # (L*C, hidden)
    enc_b1: Tensor
    enc_w2: Tensor   # (hidden, D)
    enc_b2: Tensor
    dec_w1: Tensor   # (D, hidden)
    dec_b1: Tensor
    dec_w2: Tensor   # (hidden, L*C)
    dec_b2: Tensor
    k_ts: Tensor     # (D, D) learned stable operator
    mixer: Tensor    # (n_hist, n_fut) history-to-horizon segment map


@dataclass
class KoopmanState:
    """Dynamic-branch bookkeeping for one window (diagnostics and tests)."""
    e_d_in: Tensor   # (D, n_hist)
    e_hist: Tensor   # (D, n_hist - 1)
    e_next: Tensor   # (D, n_hist - 1)
    k_td: Tensor     # (D, D) window-local fitted operator


def init_predictor(rng: np.random.Generator, cfg: KoopmanConfig, n_nodes: int,
                   hidden: int = 128) -> PredictorParams:
    seg = cfg.segment_len * n_nodes

    def xav(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    dec_out = xav(hidden, seg)
    dec_out.data *= 0.1  # blocks start with near-zero contributions
    return PredictorParams(
        enc_w1=xav(seg, hidden), enc_b1=Tensor(np.zeros(hidden), requires_grad=True),
        enc_w2=xav(hidden, cfg.embed_dim), enc_b2=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
        dec_w1=xav(cfg.embed_dim, hidden), dec_b1=Tensor(np.zeros(hidden), requires_grad=True),
        dec_w2=dec_out, dec_b2=Tensor(np.zeros(seg), requires_grad=True),
        k_ts=Tensor(np.eye(cfg.embed_dim), requires_grad=True),
        mixer=Tensor(np.full((cfg.n_hist, cfg.n_fut), 1.0 / cfg.n_hist), requires_grad=True),
    )


def encode_segments(x: Tensor, cfg: KoopmanConfig, params: PredictorParams) -> Tensor:
    """Lift a (steps, nodes) window into a (D, steps/L) embedding matrix;
    column i is the encoding of segment i."""
    steps, n = x.shape
    if steps % cfg.segment_len:
        raise ConfigError(f"window length {steps} not divisible by segment_len {cfg.segment_len}")
    seg = ad.reshape(x, (steps // cfg.segment_len, cfg.segment_len * n))
    h = ad.relu(ad.matmul(seg, params.enc_w1) + params.enc_b1)
    emb = ad.matmul(h, params.enc_w2) + params.enc_b2
    return ad.transpose(emb)


def decode_segments(emb: Tensor, cfg: KoopmanConfig, params: PredictorParams, n_nodes: int) -> Tensor:
    """Map a (D, S) embedding matrix back to a (S*L, nodes) window."""
    h = ad.relu(ad.matmul(ad.transpose(emb), params.dec_w1) + params.dec_b1)
    flat = ad.matmul(h, params.dec_w2) + params.dec_b2
    return ad.reshape(flat, (emb.shape[1] * cfg.segment_len, n_nodes))


def stable_predict(e_s_in: Tensor, params: PredictorParams, cfg: KoopmanConfig,
                   n_nodes: int) -> Tensor:
    """Stable-branch forecast: advance embeddings with the learned operator,
    mix history segments onto horizon segments, decode."""
    if e_s_in.shape != (cfg.embed_dim, cfg.n_hist):
        raise ValueError(f"expected embeddings {(cfg.embed_dim, cfg.n_hist)}, got {e_s_in.shape}")
    e_out = ad.matmul(ad.matmul(params.k_ts, e_s_in), params.mixer)
    return decode_segments(e_out, cfg, params, n_nodes)


def edmd_fit(e_d_in: Tensor, ridge: float) -> KoopmanState:
    """Fit the window-local dynamic operator from consecutive snapshot pairs."""
    s = e_d_in.shape[1]
    e_hist = e_d_in[:, : s - 1]
    e_next = e_d_in[:, 1:]
    k_td = least_squares_min_norm(e_hist, e_next, ridge)
    return KoopmanState(e_d_in=e_d_in, e_hist=e_hist, e_next=e_next, k_td=k_td)


def dynamic_rollout(k_td: Tensor, e_last: Tensor, steps: int) -> Tensor:
    """Column t is K^t applied to the last observed embedding, computed by
    repeated multiplication. Divergence is left visible for diagnostics."""
    if steps < 1:
        raise ValueError("rollout needs at least one step")
    cols = []
    e = e_last
    for _ in range(steps):
        e = ad.matmul(k_td, e)
        cols.append(e)
    return ad.concat(cols, axis=1)


def reconstruct_input(state: KoopmanState, cfg: KoopmanConfig, params: PredictorParams,
                      n_nodes: int) -> Tensor:
    """Decode [e_1, K e_1, ..., K e_{S-1}]: each later column is the one-step
    image of the previous true embedding, not a recursive rollout."""
    rec = ad.concat([state.e_d_in[:, :1], ad.matmul(state.k_td, state.e_hist)], axis=1)
    return decode_segments(rec, cfg, params, n_nodes)


def spectral_radius(k: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(np.asarray(k))).max())
