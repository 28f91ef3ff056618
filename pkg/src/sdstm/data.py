"""Dataset ingestion, normalization, windowing, and the synthetic generator.

The on-disk formats are a wide CSV (first column ISO-8601 timestamp, one
column per node id) and a JSON graph file handled by :mod:`sdstm.graph`.
The generator builds a ring-plus-chords road network and per-node series with
morning/evening diurnal peaks, one graph-diffusion step per sample, an AR(1)
local fluctuation, and white noise, all driven by a single seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .graph import RoadGraph, normalize_adjacency

logger = logging.getLogger(__name__)

DEFAULT_START = "2024-01-01T00:00:00"


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    dropped: list = field(default_factory=list)  # node ids removed for zero variance


@dataclass
class EmissionDataset:
    graph: RoadGraph
    series: np.ndarray          # (steps, nodes) float64, no NaN
    step_minutes: int
    start_time: str = DEFAULT_START
    norm_stats: NormStats | None = None

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2 or self.series.shape[1] != self.graph.node_count:
            raise DataError(
                f"series shape {self.series.shape} does not match "
                f"{self.graph.node_count} graph nodes")
        if np.isnan(self.series).any():
            raise DataError("series contains NaN after ingestion")

    @property
    def n_steps(self) -> int:
        return self.series.shape[0]

    @property
    def node_ids(self) -> list:
        return self.graph.node_ids

    def minute_of_day(self, step: int) -> int:
        start = datetime.fromisoformat(self.start_time)
        return ((start.hour * 60 + start.minute) + step * self.step_minutes) % (24 * 60)


# ---- synthetic generation -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int
    days: int
    step_minutes: int = 5
    seed: int = 0
    noise: float = 0.05      # white measurement noise (std)
    ar: float = 0.3          # AR(1) coefficient; 0 disables the AR stream entirely
    ar_noise: float = 0.15   # innovation std of the AR stream
    diffusion_alpha: float = 0.5

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ConfigError("synthetic generation needs n_nodes >= 2")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if self.step_minutes < 1 or (24 * 60) % self.step_minutes:
            raise ConfigError("step_minutes must divide a day")


def ring_chord_graph(n_nodes: int, rng: np.random.Generator) -> RoadGraph:
    """Ring over all nodes plus ~n/4 random chords, uniform positive weights."""
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        j = (i + 1) % n_nodes
        w = rng.uniform(0.5, 1.0)
        a[i, j] = a[j, i] = w
    for _ in range(max(1, n_nodes // 4)):
        i, j = rng.choice(n_nodes, size=2, replace=False)
        if a[i, j] == 0 and i != j:
            w = rng.uniform(0.3, 0.8)
            a[i, j] = a[j, i] = w
    return RoadGraph(node_ids=[f"n{i:03d}" for i in range(n_nodes)], adjacency=a)


def _circular_bump(hours: np.ndarray, centers: np.ndarray, width: float) -> np.ndarray:
    """Gaussian bump on the 24h circle; exact wraparound keeps the profile
    periodic for any per-node center. Shapes: hours (steps,), centers (n,)."""
    delta = (hours[:, None] - np.atleast_1d(centers)[None, :] + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (delta / width) ** 2)


def generate_synthetic(cfg: SynthConfig) -> EmissionDataset:
    rng = np.random.default_rng(cfg.seed)
    graph = ring_chord_graph(cfg.n_nodes, rng)
    steps_per_day = 24 * 60 // cfg.step_minutes
    steps = cfg.days * steps_per_day
    hours = (np.arange(steps) * cfg.step_minutes % (24 * 60)) / 60.0

    base = rng.uniform(0.8, 1.6, size=cfg.n_nodes)
    amp_m = rng.uniform(0.6, 1.2, size=cfg.n_nodes)
    amp_e = rng.uniform(0.5, 1.1, size=cfg.n_nodes)
    phase = rng.uniform(-1.5, 1.5, size=cfg.n_nodes)

    latent = (base[None, :]
              + amp_m[None, :] * _circular_bump(hours, 8.0 + phase, 1.3)
              + amp_e[None, :] * _circular_bump(hours, 18.0 + phase, 1.8))
    if cfg.ar != 0.0:
        innov = rng.normal(scale=cfg.ar_noise, size=(steps, cfg.n_nodes))
        ar = np.zeros((steps, cfg.n_nodes))
        for t in range(1, steps):
            ar[t] = cfg.ar * ar[t - 1] + innov[t]
        latent = latent + ar
    a_hat = normalize_adjacency(graph.adjacency, cfg.diffusion_alpha)
    coupled = latent @ a_hat  # one diffusion step per sample (a_hat symmetric)
    if cfg.noise > 0:
        coupled = coupled + rng.normal(scale=cfg.noise, size=coupled.shape)
    return EmissionDataset(graph=graph, series=coupled, step_minutes=cfg.step_minutes)


# ---- normalization ---------------------------------------------------------------


def zscore_normalize(ds: EmissionDataset, n_train_steps: int,
                     min_std: float = 1e-10) -> EmissionDataset:
    """Per-node standardization with statistics from the leading train steps
    only. Zero-variance nodes are dropped (with a warning) from both the
    series and the graph."""
    if not 0 < n_train_steps <= ds.n_steps:
        raise DataError(f"n_train_steps {n_train_steps} outside 1..{ds.n_steps}")
    train = ds.series[:n_train_steps]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    keep = np.flatnonzero(std > min_std)
    dropped = [ds.node_ids[i] for i in np.flatnonzero(std <= min_std)]
    if dropped:
        logger.warning("dropping %d constant node(s): %s", len(dropped), dropped)
    if keep.size == 0:
        raise DataError("every node is constant on the train split")
    series = (ds.series[:, keep] - mean[keep]) / std[keep]
    return EmissionDataset(
        graph=ds.graph.subgraph(list(keep)),
        series=series,
        step_minutes=ds.step_minutes,
        start_time=ds.start_time,
        norm_stats=NormStats(mean=mean[keep], std=std[keep], dropped=dropped),
    )


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values) * stats.std + stats.mean


# ---- windowing --------------------------------------------------------------------


@dataclass
class WindowSet:
    """Chronological sliding windows inside one contiguous partition.

    Item i is the pair (input (T, N), target (H, N)); both are views into the
    partition. `global_starts[i]` is the dataset step index of the first
    input row, which keeps clock-time bookkeeping possible downstream.
    """
    partition: np.ndarray
    lookback: int
    horizon: int
    split: str
    partition_start: int
    stride: int = 1

    def __len__(self) -> int:
        usable = self.partition.shape[0] - self.lookback - self.horizon + 1
        return max(0, (usable + self.stride - 1) // self.stride)

    def __getitem__(self, i: int):
        if not 0 <= i < len(self):
            raise IndexError(i)
        s = i * self.stride
        x = self.partition[s : s + self.lookback]
        y = self.partition[s + self.lookback : s + self.lookback + self.horizon]
        return x, y

    @property
    def global_starts(self) -> np.ndarray:
        return self.partition_start + np.arange(len(self)) * self.stride


def partition_bounds(n_steps: int, ratios=(7, 2, 1)) -> tuple:
    total = sum(ratios)
    n_a = n_steps * ratios[0] // total
    n_b = n_steps * ratios[1] // total
    return n_a, n_b, n_steps - n_a - n_b


def window_split(ds: EmissionDataset, lookback: int, horizon: int,
                 ratios=(7, 2, 1), val_before_test: bool = False) -> dict:
    """Contiguous chronological partition (default order train | test | val)
    with stride-1 sliding windows per partition; no window crosses a boundary.
    Set val_before_test to put validation in the middle block instead."""
    span = lookback + horizon
    n_a, n_b, n_c = partition_bounds(ds.n_steps, ratios)
    if min(n_a, n_b, n_c) < span:
        need = span * sum(ratios) // min(ratios) + sum(ratios)
        raise DataError(
            f"{ds.n_steps} steps cannot fit a {lookback}+{horizon} window in every "
            f"partition; need at least ~{need} steps")
    names = ["train", "val", "test"] if val_before_test else ["train", "test", "val"]
    bounds = [(0, n_a), (n_a, n_a + n_b), (n_a + n_b, ds.n_steps)]
    return {
        name: WindowSet(partition=ds.series[lo:hi], lookback=lookback, horizon=horizon,
                        split=name, partition_start=lo)
        for name, (lo, hi) in zip(names, bounds)
    }


# ---- CSV I/O -----------------------------------------------------------------------


def save_series_csv(path, ds: EmissionDataset):
    start = datetime.fromisoformat(ds.start_time)
    stamps = [start + timedelta(minutes=ds.step_minutes * k) for k in range(ds.n_steps)]
    frame = pd.DataFrame(ds.series, columns=[str(n) for n in ds.node_ids])
    frame.insert(0, "timestamp", [t.isoformat() for t in stamps])
    frame.to_csv(path, index=False)


def load_series_csv(path, graph: RoadGraph) -> EmissionDataset:
    """Wide CSV against an already-loaded graph; missing values are forward-
    then back-filled and the imputation rate is logged."""
    frame = pd.read_csv(path)
    if frame.shape[1] < 2:
        raise DataError(f"{path}: need a timestamp column plus node columns")
    stamp_col = frame.columns[0]
    node_cols = [str(n) for n in graph.node_ids]
    missing_cols = [c for c in node_cols if c not in frame.columns]
    if missing_cols:
        raise DataError(f"{path}: columns missing for nodes {missing_cols[:5]}")
    try:
        stamps = pd.to_datetime(frame[stamp_col])
    except (ValueError, TypeError) as e:
        raise DataError(f"{path}: unparsable timestamps ({e})") from e
    if len(frame) < 2:
        raise DataError(f"{path}: need at least two rows")
    deltas = stamps.diff().dropna().dt.total_seconds()
    if deltas.nunique() != 1 or deltas.iloc[0] <= 0 or deltas.iloc[0] % 60:
        raise DataError(f"{path}: timestamps must be evenly spaced whole minutes")
    values = frame[node_cols].to_numpy(dtype=np.float64)
    n_missing = int(np.isnan(values).sum())
    if n_missing:
        rate = n_missing / values.size
        logger.info("imputing %d missing values (%.3f%%) by forward/backward fill",
                    n_missing, 100 * rate)
        filled = pd.DataFrame(values).ffill().bfill().to_numpy()
        if np.isnan(filled).any():
            raise DataError(f"{path}: some node columns are entirely missing")
        values = filled
    return EmissionDataset(graph=graph, series=values,
                           step_minutes=int(deltas.iloc[0] // 60),
                           start_time=stamps.iloc[0].isoformat())
