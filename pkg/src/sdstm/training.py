"""Optimization loop, evaluation metrics, and checkpoint serialization."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as md
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .koopman import spectral_radius

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    train_stride: int = 1   # train on every k-th window; val/test always use all
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.train_stride < 1:
            raise ConfigError("train_stride must be >= 1")


class Adam:
    """Adam with bias correction; the learning rate is supplied per step so a
    schedule can drive it."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base_lr: float, epoch: int, max_epochs: int) -> float:
    """Decays from base_lr at epoch 0 to exactly 0 at the final epoch."""
    if max_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (max_epochs - 1)))


def early_stop_point(val_losses: list, patience: int) -> tuple:
    """(stop_epoch, best_epoch), 1-indexed, for a completed loss sequence.
    Stops after `patience` consecutive epochs without improving on the best."""
    best, best_epoch, bad = math.inf, 0, 0
    for epoch, v in enumerate(val_losses, start=1):
        if v < best:
            best, best_epoch, bad = v, epoch, 0
        else:
            bad += 1
            if bad >= patience:
                return epoch, best_epoch
    return len(val_losses), best_epoch


def train(train_ws, val_ws, cfg: md.ModelConfig, tcfg: TrainConfig,
          a_hat: np.ndarray, params: md.ModelParams | None = None,
          log=None) -> tuple:
    """Fit the model; returns (best-validation params, history rows).

    History rows carry the per-epoch learning rate, the mean training loss
    components, and the validation MSE used for early stopping.
    """
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = md.init_params(cfg, rng)
    named = params.named_tensors()
    opt = Adam(named)

    train_idx = np.arange(0, len(train_ws), tcfg.train_stride)
    if len(train_idx) == 0:
        raise DataError("training split has no windows")
    if len(val_ws) == 0:
        raise DataError("validation split has no windows")

    history = []
    best_val, best_params, bad = math.inf, None, 0
    for epoch in range(tcfg.max_epochs):
        lr = cosine_lr(tcfg.lr, epoch, tcfg.max_epochs)
        order = train_idx.copy()
        if tcfg.shuffle:
            rng.shuffle(order)
        sums = np.zeros(4)
        n_batches = 0
        for batch_no, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = order[start:start + tcfg.batch_size]
            params.zero_grad()
            total = None
            comp = np.zeros(3)
            for i in batch:
                x, y = train_ws[int(i)]
                y_hat, outs = md.model_forward(Tensor(x), params, cfg, a_hat)
                y_ts_sum, y_td_sum = _stream_sums(outs)
                y_ts_true, y_td_true = md.stream_targets(y, params.blocks[0].gate, cfg.levels)
                lb = md.loss(y, y_ts_sum, y_td_sum, y_ts_true, y_td_true)
                total = lb.total_graph if total is None else total + lb.total_graph
                comp += (lb.l_ts, lb.l_td, lb.l_cross)
            total = total * (1.0 / len(batch))
            if not np.isfinite(total.data):
                raise NumericError(f"non-finite loss in epoch {epoch}, batch {batch_no}")
            total.backward()
            opt.step(lr)
            sums += np.concatenate([comp / len(batch), [float(total.data)]])
            n_batches += 1
        val_mse = evaluate(val_ws, params, cfg, a_hat)["mse"]
        row = {"epoch": epoch, "lr": lr,
               "l_ts": sums[0] / n_batches, "l_td": sums[1] / n_batches,
               "l_cross": sums[2] / n_batches, "l_total": sums[3] / n_batches,
               "val_mse": val_mse}
        history.append(row)
        if log:
            log(row)
        if val_mse < best_val:
            best_val, best_params, bad = val_mse, params.copy(), 0
        else:
            bad += 1
            if bad >= tcfg.patience:
                break
    return best_params if best_params is not None else params, history


def _stream_sums(outs) -> tuple:
    y_ts = outs[0].y_ts_hat
    y_td = outs[0].y_td_hat
    for out in outs[1:]:
        y_ts = y_ts + out.y_ts_hat
        y_td = y_td + out.y_td_hat
    return y_ts, y_td


def persistence_forecast(x: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed row across the horizon."""
    return np.repeat(np.asarray(x)[-1:], horizon, axis=0)


def evaluate(window_set, params: md.ModelParams, cfg: md.ModelConfig,
             a_hat: np.ndarray, collect: str | None = None,
             threads: int = 1) -> dict:
    """Normalized-scale metrics over a window set, with the persistence
    baseline computed alongside.

    collect="per_node" adds per-node error arrays, "diagnostics" additionally
    gathers per-window spectral radii of the fitted dynamic operators and
    per-window predictions. Worker threads only parallelize the forward
    passes; results merge in window order.
    """
    n_windows = len(window_set)
    if n_windows == 0:
        raise DataError("cannot evaluate an empty window set")
    frozen = params.detached()

    def run(i):
        x, y = window_set[int(i)]
        y_hat, outs = md.model_forward(Tensor(x), frozen, cfg, a_hat)
        rho = [spectral_radius(o.state.k_td.data) for o in outs] if collect == "diagnostics" else None
        return y_hat.data, y, persistence_forecast(x, cfg.horizon), rho

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(n_windows)))
    else:
        results = [run(i) for i in range(n_windows)]

    h, n = cfg.horizon, cfg.n_nodes
    se_step = np.zeros(h)
    ae_step = np.zeros(h)
    se_node = np.zeros(n)
    ae_node = np.zeros(n)
    se_node_pers = np.zeros(n)
    ae_node_pers = np.zeros(n)
    radii = []
    preds = []
    for y_hat, y, y_pers, rho in results:
        err = y_hat - y
        perr = y_pers - y
        se_step += (err ** 2).mean(axis=1)
        ae_step += np.abs(err).mean(axis=1)
        se_node += (err ** 2).mean(axis=0)
        ae_node += np.abs(err).mean(axis=0)
        se_node_pers += (perr ** 2).mean(axis=0)
        ae_node_pers += np.abs(perr).mean(axis=0)
        if rho is not None:
            radii.append(rho)
            preds.append(y_hat)
    out = {
        "mse": float(se_node.mean() / n_windows),
        "mae": float(ae_node.mean() / n_windows),
        "persistence_mse": float(se_node_pers.mean() / n_windows),
        "persistence_mae": float(ae_node_pers.mean() / n_windows),
        "mse_per_step": se_step / n_windows,
        "mae_per_step": ae_step / n_windows,
        "n_windows": n_windows,
    }
    if collect in ("per_node", "diagnostics"):
        out["mse_per_node"] = se_node / n_windows
        out["mae_per_node"] = ae_node / n_windows
        out["persistence_mse_per_node"] = se_node_pers / n_windows
        out["persistence_mae_per_node"] = ae_node_pers / n_windows
    if collect == "diagnostics":
        out["spectral_radii"] = np.asarray(radii)   # (windows, blocks)
        out["predictions"] = preds
    return out


# ---- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, params: md.ModelParams, cfg: md.ModelConfig,
                    extra: dict | None = None):
    """JSON manifest: format version, echoed config, shapes, and flat values
    (float64 survives the round trip exactly via repr)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": cfg.to_dict(),
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named_tensors().items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple:
    """Returns (params, model config, extra)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    cfg = md.ModelConfig(**payload["model_config"])
    params = md.init_params(cfg, np.random.default_rng(0))
    values = {}
    for name, entry in payload["params"].items():
        values[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    params.load_named(values)
    return params, cfg, payload.get("extra", {})
