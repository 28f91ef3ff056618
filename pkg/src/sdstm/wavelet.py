"""Daubechies-4 multiresolution analysis and the gated stable/dynamic split.

The transform runs per node column over the time axis. A window is first
extended by half-sample symmetric padding to a dyadic-friendly length, then
analyzed with the periodized orthonormal filter bank, one dense orthogonal
matrix per level. Inversion is the transpose cascade followed by truncation
back to the original length, so round trips are exact to machine precision.
All steps are matrix products, which keeps the transform differentiable
inside the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _daubechies_lowpass(p: int) -> np.ndarray:
    """Orthonormal Daubechies scaling filter with p vanishing moments,
    by spectral factorization of the half-band polynomial (minimum-phase
    roots kept, taps normalized to sum to sqrt(2))."""
    y_poly = [comb(p - 1 + k, k) for k in range(p)]
    z_inside = []
    for y in np.roots(y_poly[::-1]):
        zs = np.roots([1.0, 4.0 * y - 2.0, 1.0])
        z_inside.append(zs[np.argmin(np.abs(zs))])
    h = np.real(np.poly([-1.0] * p + z_inside))
    return h * (np.sqrt(2.0) / h.sum())


# db4: 8 taps, sum sqrt(2); analysis highpass is the alternating-sign
# reversal. Quadrature conditions are exercised by the test suite.
DB4_LO = _daubechies_lowpass(4)
DB4_HI = np.array([(-1.0) ** k * DB4_LO[len(DB4_LO) - 1 - k] for k in range(len(DB4_LO))])
FILTER_LEN = len(DB4_LO)


@lru_cache(maxsize=None)
def level_matrix(n: int) -> np.ndarray:
    """Orthogonal analysis matrix for one periodized level on an even length n.

    Rows 0..n/2-1 are circular double shifts of the lowpass filter, rows
    n/2..n-1 of the highpass. The transpose is the synthesis matrix.
    """
    if n % 2 != 0:
        raise ValueError(f"periodized level needs an even length, got {n}")
    w = np.zeros((n, n))
    half = n // 2
    for i in range(half):
        for k in range(FILTER_LEN):
            j = (2 * i + k) % n
            w[i, j] += DB4_LO[k]
            w[half + i, j] += DB4_HI[k]
    w.flags.writeable = False
    return w


def padded_length(t: int, levels: int) -> int:
    """Smallest multiple of 2^levels that is >= t and keeps the deepest
    level at least one filter long."""
    unit = 1 << levels
    target = max(t, FILTER_LEN * (1 << (levels - 1)))
    return ((target + unit - 1) // unit) * unit


@dataclass
class WaveletCoeffs:
    approx: Tensor            # (P / 2^J, N) low-frequency band
    details: list             # level j entry has shape (P / 2^j, N)
    levels: int
    original_length: int
    pad_left: int

    @property
    def padded_length(self) -> int:
        return self.approx.shape[0] << self.levels


def coeff_lengths(t: int, levels: int) -> tuple:
    """(detail lengths level 1..J, approx length) implied by the padding rule."""
    p = padded_length(t, levels)
    return tuple(p >> j for j in range(1, levels + 1)), p >> levels


def _pad_symmetric(x: Tensor, pad_left: int, pad_right: int) -> Tensor:
    if pad_left == 0 and pad_right == 0:
        return x
    idx = np.pad(np.arange(x.shape[0]), (pad_left, pad_right), mode="symmetric")
    return ad.take_rows(x, idx)


def dwt(x, levels: int = 4) -> WaveletCoeffs:
    """Multi-level analysis of a (time x node) window, cascading on the
    approximation branch."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2:
        raise ValueError(f"expected a (time, node) window, got shape {x.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    t = x.shape[0]
    if t < FILTER_LEN:
        raise ValueError(
            f"window length {t} is shorter than one filter application ({FILTER_LEN})"
        )
    p = padded_length(t, levels)
    pad_left = (p - t) // 2
    s = _pad_symmetric(x, pad_left, p - t - pad_left)
    details = []
    for _ in range(levels):
        n = s.shape[0]
        y = ad.matmul(Tensor(level_matrix(n)), s)
        s = y[: n // 2]
        details.append(y[n // 2 :])
    return WaveletCoeffs(approx=s, details=details, levels=levels,
                         original_length=t, pad_left=pad_left)


def idwt(c: WaveletCoeffs) -> Tensor:
    """Exact inverse of :func:`dwt`, truncated to the original window length."""
    s = c.approx
    for d in reversed(c.details):
        y = ad.concat([s, d], axis=0)
        s = ad.matmul(Tensor(level_matrix(y.shape[0]).T), y)
    return s[c.pad_left : c.pad_left + c.original_length]


def lowpass_reconstruct(c: WaveletCoeffs) -> Tensor:
    """Inverse transform with every detail band zeroed: the low-frequency
    estimate of the analyzed window."""
    s = c.approx
    n = s.shape[0] * 2
    for _ in range(c.levels):
        w = level_matrix(n)
        s = ad.matmul(Tensor(w[: n // 2].T), s)
        n *= 2
    return s[c.pad_left : c.pad_left + c.original_length]


# ---- gated soft separation ---------------------------------------------------


@dataclass
class GateParams:
    """Trainable 1-D convolution producing the per-entry gate.

    weight has shape (2, kernel) shared across nodes, or (2, kernel, N) when
    a per-node gate is configured; bias is () or (N,).
    """
    weight: Tensor
    bias: Tensor

    @property
    def kernel(self) -> int:
        return self.weight.shape[1]


def init_gate(rng: np.random.Generator, kernel: int = 3, n_nodes: int | None = None) -> GateParams:
    """Small random conv weights; bias starts at +2 so the gate opens near the
    hard wavelet split (gamma ~ 0.88) and training softens it from there."""
    shape = (2, kernel) if n_nodes is None else (2, kernel, n_nodes)
    scale = np.sqrt(2.0 / (2 * kernel))
    w = Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
    b = Tensor(np.full(() if n_nodes is None else (n_nodes,), 2.0), requires_grad=True)
    return GateParams(weight=w, bias=b)


@dataclass
class DecomposedPair:
    x_ts: Tensor    # time-stable stream; x_ts + x_td == input exactly
    x_td: Tensor    # time-dynamic stream
    gamma: Tensor   # gate in (0, 1), shape (time, node)
    x_low: Tensor   # low-frequency estimate the gate compares against


def _gate_conv(x: Tensor, x_low: Tensor, gate: GateParams) -> Tensor:
    # zero-padded in time, kernel centered on the current step
    t, n = x.shape
    k = gate.kernel
    pad = Tensor(np.zeros((k // 2, n)))
    xp = ad.concat([pad, x, pad], axis=0)
    lp = ad.concat([pad, x_low, pad], axis=0)
    acc = gate.bias
    for j in range(k):
        acc = acc + xp[j : j + t] * gate.weight[0, j] + lp[j : j + t] * gate.weight[1, j]
    return acc


def gated_decompose(x, gate: GateParams, levels: int = 4) -> DecomposedPair:
    """Split a window into time-stable and time-dynamic streams.

    The gate compares the window with its low-frequency reconstruction and
    softly routes the difference into the dynamic stream:
    x_td = gamma * (x - x_low), x_ts = x - x_td.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    coeffs = dwt(x, levels)
    x_low = lowpass_reconstruct(coeffs)
    gamma = ad.sigmoid(_gate_conv(x, x_low, gate))
    x_td = gamma * (x - x_low)
    x_ts = x - x_td
    return DecomposedPair(x_ts=x_ts, x_td=x_td, gamma=gamma, x_low=x_low)


def degree_of_variation(x_ts, x_td, period: int) -> tuple:
    """Fluctuation diagnostic: std of linear-fit slopes over periodic subsets.

    Subset p collects the samples at phase p of every complete period
    (x[p::period]); a straight line is fitted to each subset across periods
    and the standard deviation of the slopes (averaged over nodes) comes back
    as (stable, dynamic). A component that repeats every period yields nearly
    identical slopes at every phase, so its spread collapses; irregular
    content spreads the slopes out.
    """
    def _slope_std(arr: np.ndarray) -> float:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        n_per = arr.shape[0] // period
        if n_per < 2:
            raise ValueError(
                f"need at least 2 complete periods of {period} steps, "
                f"window has {arr.shape[0]}"
            )
        y = arr[: n_per * period].reshape(n_per, period, -1)   # (period#, phase, node)
        t = np.arange(n_per) - (n_per - 1) / 2.0
        slopes = np.einsum("k,kpn->pn", t, y) / np.dot(t, t)
        return float(slopes.std(axis=0, ddof=0).mean())

    ts = x_ts.data if isinstance(x_ts, Tensor) else x_ts
    td = x_td.data if isinstance(x_td, Tensor) else x_td
    return _slope_std(ts), _slope_std(td)
