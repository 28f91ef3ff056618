"""Command-line entry point: generate | train | eval | predict | decompose.

Configuration is a flat-key JSON file; command-line flags override file
values, and the effective configuration is always written next to the
outputs. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import data as dt
from . import graph as gr
from . import model as md
from . import training as tr
from . import wavelet as wv
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError, SDSTMError

logger = logging.getLogger("sdstm")


@dataclass
class RunConfig:
    # dataset: file paths, or an inline synthetic spec used when series is unset
    series: str | None = None
    graph: str | None = None
    out: str = "runs/out"
    synth_nodes: int = 20
    synth_days: int = 31
    synth_step_minutes: int = 5
    synth_noise: float = 0.05
    synth_ar: float = 0.3
    # model shape
    horizon: int = 24
    lookback: int | None = None        # defaults to 2 * horizon
    segment_len: int | None = None     # defaults to the closest-to-8-segments divisor
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
    se_ratio: int = 4
    gate_per_node: bool = False
    # optimization
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    train_stride: int = 1
    seed: int = 0
    val_before_test: bool = False
    threads: int = 1
    # per-command arguments (settable from flags or config alike)
    checkpoint: str | None = None
    hours: str | None = None
    start_index: int | None = None
    node_ids: str | None = None

    def resolved_lookback(self) -> int:
        return self.lookback if self.lookback is not None else 2 * self.horizon

    def resolved_segment_len(self) -> int:
        if self.segment_len is not None:
            return self.segment_len
        return md.default_segment_len(self.resolved_lookback(), self.horizon)

    def model_config(self, n_nodes: int) -> md.ModelConfig:
        return md.ModelConfig(
            n_nodes=n_nodes, lookback=self.resolved_lookback(), horizon=self.horizon,
            segment_len=self.resolved_segment_len(), embed_dim=self.embed_dim,
            n_blocks=self.n_blocks, alpha=self.alpha, heads=self.heads,
            attn_dim=self.attn_dim, gcn_hidden=self.gcn_hidden, gcn_layers=self.gcn_layers,
            levels=self.levels, ridge=self.ridge, enc_hidden=self.enc_hidden,
            se_ratio=self.se_ratio, gate_per_node=self.gate_per_node)

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(lr=self.lr, batch_size=self.batch_size,
                              max_epochs=self.epochs, patience=self.patience,
                              seed=self.seed, train_stride=self.train_stride)


_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        unknown = set(raw) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"bad config values: {e}") from e
    cap = os.environ.get("SDSTM_THREADS")
    if cap:
        try:
            cap = int(cap)
        except ValueError as e:
            raise ConfigError(f"SDSTM_THREADS must be an integer, got {cap!r}") from e
        if cap < 1:
            raise ConfigError(f"SDSTM_THREADS must be >= 1, got {cap}")
        cfg.threads = min(cfg.threads, cap)
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def write_effective_config(cfg: RunConfig, out_dir: Path):
    with open(out_dir / "effective_config.json", "w") as fh:
        json.dump(asdict(cfg), fh, indent=1, sort_keys=True)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig) -> dt.EmissionDataset:
    if cfg.series is None:
        logger.info("no series path set; generating a synthetic dataset inline")
        return dt.generate_synthetic(dt.SynthConfig(
            n_nodes=cfg.synth_nodes, days=cfg.synth_days,
            step_minutes=cfg.synth_step_minutes, seed=cfg.seed,
            noise=cfg.synth_noise, ar=cfg.synth_ar, diffusion_alpha=cfg.alpha))
    if cfg.graph is None:
        raise ConfigError("a graph path is required when series is set")
    if not Path(cfg.series).exists():
        raise DataError(f"series file not found: {cfg.series}")
    if not Path(cfg.graph).exists():
        raise DataError(f"graph file not found: {cfg.graph}")
    return dt.load_series_csv(cfg.series, gr.load_graph_json(cfg.graph))


def _normalized_splits(cfg: RunConfig, ds: dt.EmissionDataset):
    n_train = dt.partition_bounds(ds.n_steps)[0]
    norm = dt.zscore_normalize(ds, n_train)
    splits = dt.window_split(norm, cfg.resolved_lookback(), cfg.horizon,
                             val_before_test=cfg.val_before_test)
    return norm, splits


# ---- commands -----------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    ds = dt.generate_synthetic(dt.SynthConfig(
        n_nodes=cfg.synth_nodes, days=cfg.synth_days,
        step_minutes=cfg.synth_step_minutes, seed=cfg.seed,
        noise=cfg.synth_noise, ar=cfg.synth_ar, diffusion_alpha=cfg.alpha))
    dt.save_series_csv(out / "series.csv", ds)
    gr.save_graph_json(out / "graph.json", ds.graph)
    write_effective_config(cfg, out)
    logger.info("wrote %s rows x %s nodes to %s", ds.n_steps, ds.graph.node_count, out)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    norm, splits = _normalized_splits(cfg, ds)
    mcfg = cfg.model_config(norm.graph.node_count)
    a_hat = norm.graph.normalized(mcfg.alpha)
    out = _prepare_out(cfg)
    write_effective_config(cfg, out)

    params, history = tr.train(splits["train"], splits["val"], mcfg, cfg.train_config(),
                               a_hat, log=lambda row: logger.info(
                                   "epoch %d lr %.2e train %.4f val %.4f",
                                   row["epoch"], row["lr"], row["l_total"], row["val_mse"]))
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)

    test_metrics = tr.evaluate(splits["test"], params, mcfg, a_hat, threads=cfg.threads)
    metrics = {
        "test_mse": test_metrics["mse"], "test_mae": test_metrics["mae"],
        "persistence_mse": test_metrics["persistence_mse"],
        "persistence_mae": test_metrics["persistence_mae"],
        "best_val_mse": min(h["val_mse"] for h in history),
        "epochs_run": len(history),
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    tr.save_checkpoint(out / "checkpoint.json", params, mcfg, extra={
        "norm_mean": norm.norm_stats.mean.tolist(),
        "norm_std": norm.norm_stats.std.tolist(),
        "node_ids": [str(n) for n in norm.graph.node_ids],
        "run_config": asdict(cfg),
    })
    logger.info("test MSE %.4f (persistence %.4f)", metrics["test_mse"],
                metrics["persistence_mse"])
    return 0


def _load_checkpoint_for(cfg: RunConfig, ds_nodes: int):
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint.json"
    if not ckpt_path.exists():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    params, mcfg, extra = tr.load_checkpoint(ckpt_path)
    if mcfg.n_nodes != ds_nodes:
        raise ConfigError(
            f"checkpoint was trained on {mcfg.n_nodes} nodes but the dataset has {ds_nodes}")
    return params, mcfg, extra


def _parse_hours(spec: str | None):
    if not spec:
        return None
    try:
        lo, hi = (int(p) for p in spec.split("-"))
    except ValueError as e:
        raise ConfigError(f"--hours expects 'LO-HI', got {spec!r}") from e
    if not (0 <= lo < 24 and 0 < hi <= 24 and lo < hi):
        raise ConfigError(f"--hours range {spec!r} outside 0-24")
    return lo, hi


def cmd_eval(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    norm, splits = _normalized_splits(cfg, ds)
    params, mcfg, _ = _load_checkpoint_for(cfg, norm.graph.node_count)
    if (mcfg.lookback, mcfg.horizon) != (cfg.resolved_lookback(), cfg.horizon):
        raise ConfigError(
            f"checkpoint shapes T={mcfg.lookback} H={mcfg.horizon} do not match the "
            f"requested T={cfg.resolved_lookback()} H={cfg.horizon}")
    a_hat = norm.graph.normalized(mcfg.alpha)
    out = _prepare_out(cfg)
    write_effective_config(cfg, out)
    ws = splits["test"]
    res = tr.evaluate(ws, params, mcfg, a_hat, collect="diagnostics", threads=cfg.threads)

    hours = _parse_hours(cfg.hours)
    node_ids = [str(n) for n in norm.graph.node_ids]
    per_node = _per_node_table(ws, res, norm, mcfg, hours)
    with open(out / "per_node_error.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "mse", "mae", "persistence_mse", "persistence_mae",
                         "mse_vs_persistence"])
        for nid, row in zip(node_ids, per_node):
            writer.writerow([nid] + [f"{v:.8f}" for v in row])

    per_hour = _per_hour_table(ws, res, norm, mcfg)
    with open(out / "per_hour_error.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", "mse", "mae", "n_samples"])
        for hour, (mse, mae, count) in enumerate(per_hour):
            writer.writerow([hour, f"{mse:.8f}", f"{mae:.8f}", int(count)])

    with open(out / "spectral_radius.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window"] + [f"block{b}" for b in range(res["spectral_radii"].shape[1])])
        for w, row in enumerate(res["spectral_radii"]):
            writer.writerow([w] + [f"{v:.6f}" for v in row])

    metrics = {
        "mse": res["mse"], "mae": res["mae"],
        "persistence_mse": res["persistence_mse"], "persistence_mae": res["persistence_mae"],
        "mse_vs_persistence": res["mse"] / res["persistence_mse"],
        "n_windows": res["n_windows"],
    }
    if hours:
        filt = _hour_filtered_metrics(ws, res, norm, mcfg, hours)
        metrics.update({"hours": f"{hours[0]}-{hours[1]}",
                        "hour_filtered_mse": filt[0], "hour_filtered_mae": filt[1]})
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    logger.info("eval MSE %.4f MAE %.4f over %d windows", res["mse"], res["mae"],
                res["n_windows"])
    return 0


def _target_hours(ws: dt.WindowSet, norm: dt.EmissionDataset, mcfg) -> np.ndarray:
    """(windows, horizon) clock hour of every forecast step."""
    starts = ws.global_starts[:, None] + ws.lookback + np.arange(mcfg.horizon)[None, :]
    start = datetime.fromisoformat(norm.start_time)
    minute0 = start.hour * 60 + start.minute
    return ((minute0 + starts * norm.step_minutes) // 60) % 24


def _per_node_table(ws, res, norm, mcfg, hours):
    if hours is None:
        return np.column_stack([res["mse_per_node"], res["mae_per_node"],
                                res["persistence_mse_per_node"], res["persistence_mae_per_node"],
                                res["mse_per_node"] / res["persistence_mse_per_node"]])
    mask = _hour_mask(ws, res, norm, mcfg, hours)
    se = np.zeros(mcfg.n_nodes)
    ae = np.zeros(mcfg.n_nodes)
    pse = np.zeros(mcfg.n_nodes)
    pae = np.zeros(mcfg.n_nodes)
    count = 0
    for w, pred in enumerate(res["predictions"]):
        rows = mask[w]
        if not rows.any():
            continue
        x, y = ws[w]
        err = pred[rows] - y[rows]
        perr = tr.persistence_forecast(x, mcfg.horizon)[rows] - y[rows]
        se += (err ** 2).sum(axis=0)
        ae += np.abs(err).sum(axis=0)
        pse += (perr ** 2).sum(axis=0)
        pae += np.abs(perr).sum(axis=0)
        count += int(rows.sum())
    if count == 0:
        raise DataError(f"no forecast steps fall inside hours {hours[0]}-{hours[1]}")
    with np.errstate(divide="ignore"):
        ratio = np.where(pse > 0, se / np.maximum(pse, 1e-300), np.inf)
    return np.column_stack([se / count, ae / count, pse / count, pae / count, ratio])


def _hour_mask(ws, res, norm, mcfg, hours):
    th = _target_hours(ws, norm, mcfg)
    return (th >= hours[0]) & (th < hours[1])


def _per_hour_table(ws, res, norm, mcfg):
    th = _target_hours(ws, norm, mcfg)
    table = np.zeros((24, 3))
    for w, pred in enumerate(res["predictions"]):
        _, y = ws[w]
        err = pred - y
        for hour in range(24):
            rows = th[w] == hour
            if rows.any():
                table[hour, 0] += (err[rows] ** 2).sum()
                table[hour, 1] += np.abs(err[rows]).sum()
                table[hour, 2] += rows.sum() * mcfg.n_nodes
    out = np.zeros((24, 3))
    nz = table[:, 2] > 0
    out[nz, 0] = table[nz, 0] / table[nz, 2]
    out[nz, 1] = table[nz, 1] / table[nz, 2]
    out[:, 2] = table[:, 2]
    return out


def _hour_filtered_metrics(ws, res, norm, mcfg, hours):
    mask = _hour_mask(ws, res, norm, mcfg, hours)
    se, ae, count = 0.0, 0.0, 0
    for w, pred in enumerate(res["predictions"]):
        rows = mask[w]
        if not rows.any():
            continue
        _, y = ws[w]
        err = pred[rows] - y[rows]
        se += (err ** 2).sum()
        ae += np.abs(err).sum()
        count += err.size
    if count == 0:
        raise DataError(f"no forecast steps fall inside hours {hours[0]}-{hours[1]}")
    return se / count, ae / count


def cmd_predict(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    norm, _ = _normalized_splits(cfg, ds)
    params, mcfg, extra = _load_checkpoint_for(cfg, norm.graph.node_count)
    a_hat = norm.graph.normalized(mcfg.alpha)
    out = _prepare_out(cfg)
    write_effective_config(cfg, out)
    start = cfg.start_index if cfg.start_index is not None else norm.n_steps - mcfg.lookback
    if not 0 <= start <= norm.n_steps - mcfg.lookback:
        raise ConfigError(f"--start {start} leaves no room for a {mcfg.lookback}-step lookback")
    x = norm.series[start : start + mcfg.lookback]
    y_hat, _ = md.model_forward(Tensor(x), params.detached(), mcfg, a_hat)
    raw = dt.denormalize(y_hat.data, norm.norm_stats)
    first = datetime.fromisoformat(norm.start_time) + timedelta(
        minutes=(start + mcfg.lookback) * norm.step_minutes)
    with open(out / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + [str(n) for n in norm.graph.node_ids])
        for k in range(mcfg.horizon):
            stamp = first + timedelta(minutes=k * norm.step_minutes)
            writer.writerow([stamp.isoformat()] + [f"{v:.8f}" for v in raw[k]])
    logger.info("wrote %d forecast rows to %s", mcfg.horizon, out / "predictions.csv")
    return 0


def cmd_decompose(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    out = _prepare_out(cfg)
    write_effective_config(cfg, out)
    if cfg.checkpoint:
        params, mcfg, extra = _load_checkpoint_for(cfg, ds.graph.node_count)
        gate = params.blocks[0].gate
        levels = mcfg.levels
        mean = np.asarray(extra["norm_mean"], dtype=np.float64)
        std = np.asarray(extra["norm_std"], dtype=np.float64)
        if mean.shape[0] != ds.graph.node_count:
            raise ConfigError("checkpoint normalization does not match the dataset nodes")
    else:
        gate = wv.init_gate(np.random.default_rng(cfg.seed))
        levels = cfg.levels
        mean = ds.series.mean(axis=0)
        std = ds.series.std(axis=0)
        if (std <= 1e-10).any():
            raise DataError("constant node column; cannot normalize for decomposition")

    requested = cfg.node_ids.split(",") if cfg.node_ids else None
    ids = [str(n) for n in ds.node_ids]
    if requested:
        unknown = [n for n in requested if n not in ids]
        if unknown:
            raise DataError(f"unknown node id(s): {unknown}")

    chunk = cfg.resolved_lookback()
    normed = (ds.series - mean) / std
    parts_ts, parts_td, parts_gamma = [], [], []
    frozen = wv.GateParams(weight=gate.weight.detach(), bias=gate.bias.detach())
    for lo in range(0, ds.n_steps - ds.n_steps % chunk, chunk):
        pair = wv.gated_decompose(Tensor(normed[lo : lo + chunk]), frozen, levels)
        parts_ts.append(pair.x_ts.data)
        parts_td.append(pair.x_td.data)
        parts_gamma.append(pair.gamma.data)
    used = len(parts_ts) * chunk
    # undo normalization so the two component files sum to the raw input:
    # the stable stream carries the mean, both scale by std
    x_ts = np.concatenate(parts_ts) * std + mean
    x_td = np.concatenate(parts_td) * std
    gamma = np.concatenate(parts_gamma)

    def dump(name, arr):
        sub = dt.EmissionDataset(graph=ds.graph, series=arr, step_minutes=ds.step_minutes,
                                 start_time=ds.start_time)
        dt.save_series_csv(out / name, sub)

    dump("x_ts.csv", x_ts)
    dump("x_td.csv", x_td)
    dump("gamma.csv", gamma)

    period = 24 * 60 // ds.step_minutes
    sample = requested or _sample_nodes(ids, cfg.seed)
    lines = []
    for nid in sample:
        col = ids.index(nid)
        dov = wv.degree_of_variation(x_ts[:used, col : col + 1], x_td[:used, col : col + 1],
                                     period)
        lines.append(f"{nid}\tstable={dov[0]:.6g}\tdynamic={dov[1]:.6g}")
    (out / "degree_of_variation.txt").write_text("\n".join(lines) + "\n")
    logger.info("decomposed %d steps over %d nodes; sampled %s", used, len(ids), sample)
    return 0


def _sample_nodes(ids: list, seed: int, k: int = 4) -> list:
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
    return [ids[i] for i in sorted(pick)]


# ---- argument parsing -------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file with flat keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--horizon", type=int)
    p.add_argument("--lookback", type=int)
    p.add_argument("--blocks", dest="n_blocks", type=int)
    p.add_argument("--segment-len", dest="segment_len", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--series")
    p.add_argument("--graph")
    p.add_argument("--levels", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdstm",
                                     description="scale-disentangled spatiotemporal forecaster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic series.csv and graph.json")
    _add_common(p)
    p.add_argument("--nodes", dest="synth_nodes", type=int)
    p.add_argument("--days", dest="synth_days", type=int)
    p.add_argument("--step-minutes", dest="synth_step_minutes", type=int)
    p.add_argument("--noise", dest="synth_noise", type=float)
    p.add_argument("--ar", dest="synth_ar", type=float)

    p = sub.add_parser("train", help="fit a model and write checkpoint + metrics")
    _add_common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--train-stride", dest="train_stride", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--attn-dim", dest="attn_dim", type=int)
    p.add_argument("--enc-hidden", dest="enc_hidden", type=int)
    p.add_argument("--gcn-hidden", dest="gcn_hidden", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--hours", help="clock-hour filter LO-HI, e.g. 8-9")

    p = sub.add_parser("predict", help="forecast from a lookback window")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--start", dest="start_index", type=int,
                   help="dataset step index of the lookback start (default: last window)")

    p = sub.add_parser("decompose", help="dump stable/dynamic components and the gate")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--node-ids", dest="node_ids",
                   help="comma-separated node ids for the variation report")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "decompose": cmd_decompose,
}

_EXIT_CODES = {ConfigError: 2, DataError: 3, NumericError: 4}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_run_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except SDSTMError as e:
        print(f"error: {e}", file=sys.stderr)
        for etype, code in _EXIT_CODES.items():
            if isinstance(e, etype):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
