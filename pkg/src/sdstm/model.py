"""Block wiring, residual stacking, and the three-term training loss.

A block splits its input window into time-stable/time-dynamic streams, runs
both through the shared spatial modules, fuses, and forecasts each stream
with its Koopman predictor. The dynamic branch also reconstructs its input;
the reconstruction residual becomes the next block's input, and the final
forecast is the sum of every block's two streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import graph as gr
from . import koopman as kp
from . import wavelet as wv
from .autodiff import Tensor
from .errors import ConfigError

DEFAULT_SEGMENTS = 8  # aim for lookback/segment_len == 8 when divisibility allows


def default_segment_len(lookback: int, horizon: int) -> int:
    """Largest common divisor of lookback and horizon whose segment count is
    closest to DEFAULT_SEGMENTS (ties broken toward more segments)."""
    candidates = [d for d in range(1, min(lookback, horizon) + 1)
                  if lookback % d == 0 and horizon % d == 0 and lookback // d >= 2]
    if not candidates:
        raise ConfigError(f"no segment length divides lookback {lookback} and horizon {horizon}")
    return min(candidates, key=lambda d: (abs(lookback / d - DEFAULT_SEGMENTS), d))


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    lookback: int
    horizon: int
    segment_len: int
    embed_dim: int = 64
    n_blocks: int = 2
    alpha: float = 0.5
    heads: int = 4
    attn_dim: int = 16
    gcn_hidden: int = 16
    gcn_layers: int = 2
    levels: int = 4
    ridge: float = 1e-6
    enc_hidden: int = 128
    fusion_hidden: int | None = None
    se_ratio: int = 4
    gate_per_node: bool = False

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.attn_dim % self.heads:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        self.koopman()  # validate divisibility early

    def koopman(self) -> kp.KoopmanConfig:
        return kp.KoopmanConfig(segment_len=self.segment_len, embed_dim=self.embed_dim,
                                lookback=self.lookback, horizon=self.horizon, ridge=self.ridge)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class BlockParams:
    gate: wv.GateParams
    spatial: gr.SpatialParams
    pred: kp.PredictorParams


@dataclass
class ModelParams:
    blocks: list

    def named_tensors(self) -> dict:
        out = {}
        for b, blk in enumerate(self.blocks):
            out[f"block{b}.gate.weight"] = blk.gate.weight
            out[f"block{b}.gate.bias"] = blk.gate.bias
            for i, w in enumerate(blk.spatial.gcn.weights):
                out[f"block{b}.gcn.w{i}"] = w
            at = blk.spatial.attn
            out[f"block{b}.attn.w_q"] = at.w_q
            out[f"block{b}.attn.w_k"] = at.w_k
            out[f"block{b}.attn.w_v"] = at.w_v
            for stream in ("fuse_ts", "fuse_td"):
                fp = getattr(blk.spatial, stream)
                for name in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                             "se_w1", "se_b1", "se_w2", "se_b2"):
                    out[f"block{b}.{stream}.{name}"] = getattr(fp, name)
            pp = blk.pred
            for name in ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
                         "dec_w1", "dec_b1", "dec_w2", "dec_b2", "k_ts", "mixer"):
                out[f"block{b}.pred.{name}"] = getattr(pp, name)
        return out

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return init_params_like(self)

    def detached(self) -> "ModelParams":
        """Same data, requires_grad off: forward passes build no graph."""
        clone = self.copy()
        for t in clone.named_tensors().values():
            t.requires_grad = False
        return clone

    def load_named(self, values: dict):
        mine = self.named_tensors()
        missing = set(mine) ^ set(values)
        if missing:
            raise ConfigError(f"parameter names do not match checkpoint: {sorted(missing)[:4]}...")
        for name, t in mine.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"checkpoint shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    koop = cfg.koopman()
    blocks = []
    for _ in range(cfg.n_blocks):
        gate = wv.init_gate(rng, n_nodes=cfg.n_nodes if cfg.gate_per_node else None)
        spatial = gr.init_spatial(rng, cfg.n_nodes, gcn_hidden=cfg.gcn_hidden,
                                  gcn_layers=cfg.gcn_layers, attn_dim=cfg.attn_dim,
                                  heads=cfg.heads, fusion_hidden=cfg.fusion_hidden,
                                  se_ratio=cfg.se_ratio)
        pred = kp.init_predictor(rng, koop, cfg.n_nodes, hidden=cfg.enc_hidden)
        blocks.append(BlockParams(gate=gate, spatial=spatial, pred=pred))
    return ModelParams(blocks=blocks)


def init_params_like(params: ModelParams) -> ModelParams:
    """Structural clone (same shapes, fresh tensors)."""
    blocks = []
    for blk in params.blocks:
        gate = wv.GateParams(weight=Tensor(blk.gate.weight.data.copy(), requires_grad=True),
                             bias=Tensor(blk.gate.bias.data.copy(), requires_grad=True))
        gcn = gr.GCNParams(weights=[Tensor(w.data.copy(), requires_grad=True)
                                    for w in blk.spatial.gcn.weights])
        attn = gr.AttentionParams(w_q=Tensor(blk.spatial.attn.w_q.data.copy(), requires_grad=True),
                                  w_k=Tensor(blk.spatial.attn.w_k.data.copy(), requires_grad=True),
                                  w_v=Tensor(blk.spatial.attn.w_v.data.copy(), requires_grad=True),
                                  heads=blk.spatial.attn.heads)

        def fuse_clone(fp):
            return gr.FusionParams(**{f.name: Tensor(getattr(fp, f.name).data.copy(),
                                                     requires_grad=True)
                                      for f in fields(gr.FusionParams)})

        pred = kp.PredictorParams(**{f.name: Tensor(getattr(blk.pred, f.name).data.copy(),
                                                    requires_grad=True)
                                     for f in fields(kp.PredictorParams)})
        blocks.append(BlockParams(
            gate=gate,
            spatial=gr.SpatialParams(gcn=gcn, attn=attn,
                                     fuse_ts=fuse_clone(blk.spatial.fuse_ts),
                                     fuse_td=fuse_clone(blk.spatial.fuse_td)),
            pred=pred))
    return ModelParams(blocks=blocks)


# ---- forward ------------------------------------------------------------------


@dataclass
class BlockOutput:
    y_ts_hat: Tensor      # (H, N) stable-stream forecast
    y_td_hat: Tensor      # (H, N) dynamic-stream forecast
    x_td_recon: Tensor    # (T, N) dynamic-branch reconstruction of its input
    next_input: Tensor    # (T, N) == x_td - x_td_recon
    gamma: Tensor = None
    state: kp.KoopmanState = None


def block_forward(x: Tensor, block: BlockParams, a_hat: np.ndarray,
                  cfg: ModelConfig) -> BlockOutput:
    koop = cfg.koopman()
    pair = wv.gated_decompose(x, block.gate, cfg.levels)

    ss_ts = gr.space_stable(pair.x_ts, a_hat, block.spatial.gcn)
    sd_ts = gr.space_dynamic(pair.x_ts, block.spatial.attn)
    ss_td = gr.space_stable(pair.x_td, a_hat, block.spatial.gcn)
    sd_td = gr.space_dynamic(pair.x_td, block.spatial.attn)
    xhat_ts = gr.fuse_spatial(ss_ts, sd_ts, block.spatial.fuse_ts)
    xhat_td = gr.fuse_spatial(ss_td, sd_td, block.spatial.fuse_td)

    e_s = kp.encode_segments(xhat_ts, koop, block.pred)
    y_ts_hat = kp.stable_predict(e_s, block.pred, koop, cfg.n_nodes)

    e_d = kp.encode_segments(xhat_td, koop, block.pred)
    state = kp.edmd_fit(e_d, cfg.ridge)
    rolled = kp.dynamic_rollout(state.k_td, e_d[:, koop.n_hist - 1 :], koop.n_fut)
    y_td_hat = kp.decode_segments(rolled, koop, block.pred, cfg.n_nodes)
    x_td_recon = kp.reconstruct_input(state, koop, block.pred, cfg.n_nodes)

    return BlockOutput(y_ts_hat=y_ts_hat, y_td_hat=y_td_hat, x_td_recon=x_td_recon,
                       next_input=pair.x_td - x_td_recon, gamma=pair.gamma, state=state)


def model_forward(x, params: ModelParams, cfg: ModelConfig,
                  a_hat: np.ndarray) -> tuple:
    """Run every block on the chained residuals; the forecast is the sum of
    all stream outputs. Returns (y_hat, [BlockOutput...])."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != (cfg.lookback, cfg.n_nodes):
        raise ValueError(f"expected input {(cfg.lookback, cfg.n_nodes)}, got {x.shape}")
    outputs = []
    current = x
    y_hat = None
    for idx, block in enumerate(params.blocks):
        try:
            out = block_forward(current, block, a_hat, cfg)
        except Exception as e:
            try:
                wrapped = type(e)(f"block {idx}: {e}")
            except Exception:
                wrapped = RuntimeError(f"block {idx}: {e}")
            raise wrapped from e
        outputs.append(out)
        contrib = out.y_ts_hat + out.y_td_hat
        y_hat = contrib if y_hat is None else y_hat + contrib
        current = out.next_input
    return y_hat, outputs


# ---- loss -----------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_ts: float
    l_td: float
    l_cross: float
    l_total: float
    total_graph: Tensor = field(repr=False, default=None)


def stream_targets(y_true: np.ndarray, gate: wv.GateParams, levels: int) -> tuple:
    """Split the horizon window with the current gate, detached: targets are
    constants, no gradient flows into the gate through them."""
    frozen = wv.GateParams(weight=gate.weight.detach(), bias=gate.bias.detach())
    pair = wv.gated_decompose(Tensor(np.asarray(y_true, dtype=np.float64)), frozen, levels)
    return pair.x_ts.data, pair.x_td.data


def loss(y_true, y_ts_hat_sum: Tensor, y_td_hat_sum: Tensor,
         y_ts_true: np.ndarray, y_td_true: np.ndarray) -> LossBreakdown:
    """Three-term objective. The cross term completes the square, so l_total
    always equals the MSE of the summed forecast; training minimizes the
    directly computed total while the components are logged as diagnostics."""
    y_true = np.asarray(y_true, dtype=np.float64)
    if not np.allclose(y_ts_true + y_td_true, y_true, atol=1e-9):
        raise ValueError("target decomposition is not additive")
    r_ts = y_ts_true - y_ts_hat_sum.data
    r_td = y_td_true - y_td_hat_sum.data
    l_ts = float((r_ts ** 2).mean())
    l_td = float((r_td ** 2).mean())
    l_cross = float(2.0 * (r_ts * r_td).mean())
    total = ad.tmean((Tensor(y_true) - (y_ts_hat_sum + y_td_hat_sum)) ** 2.0)
    return LossBreakdown(l_ts=l_ts, l_td=l_td, l_cross=l_cross,
                         l_total=float(total.data), total_graph=total)
