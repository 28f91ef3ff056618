"""Shared oracle builders for the test suite (independent of library internals)."""

import numpy as np

from sdstm.autodiff import Tensor
from sdstm.graph import normalize_adjacency
from sdstm.koopman import PredictorParams


def ring_adjacency(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return a


def ring_a_hat(n: int, alpha: float = 0.5) -> np.ndarray:
    return normalize_adjacency(ring_adjacency(n), alpha)


def rotation_system(d: int, rng: np.random.Generator, lo=0.7, hi=0.95) -> np.ndarray:
    """Random stable linear generator: orthogonally conjugated 2x2 rotation
    blocks with spectral radii in [lo, hi]; keeps snapshot matrices well
    conditioned so the operator is identifiable from one trajectory."""
    m = np.zeros((d, d))
    i = 0
    while i + 1 < d:
        r = rng.uniform(lo, hi)
        th = rng.uniform(0.3, 2.8)
        m[i : i + 2, i : i + 2] = r * np.array([[np.cos(th), -np.sin(th)],
                                                [np.sin(th), np.cos(th)]])
        i += 2
    if i < d:
        m[i, i] = rng.uniform(lo, hi)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q @ m @ q.T


def trajectory(k: np.ndarray, e0: np.ndarray, n_cols: int) -> np.ndarray:
    cols = [e0]
    for _ in range(n_cols - 1):
        cols.append(k @ cols[-1])
    return np.concatenate(cols, axis=1)


def identity_codec(cfg, n_nodes: int) -> PredictorParams:
    """Encoder/decoder pair that is exactly the identity despite the ReLU:
    the hidden layer stacks (x, -x) and the output recombines x+ - x-."""
    f = cfg.segment_len * n_nodes
    assert cfg.embed_dim == f, "identity pair needs embed_dim == segment_len * nodes"
    eye = np.eye(f)
    stack = np.concatenate([eye, -eye], axis=1)
    unstack = np.concatenate([eye, -eye], axis=0)
    return PredictorParams(
        enc_w1=Tensor(stack.copy(), requires_grad=True),
        enc_b1=Tensor(np.zeros(2 * f), requires_grad=True),
        enc_w2=Tensor(unstack.copy(), requires_grad=True),
        enc_b2=Tensor(np.zeros(f), requires_grad=True),
        dec_w1=Tensor(stack.copy(), requires_grad=True),
        dec_b1=Tensor(np.zeros(2 * f), requires_grad=True),
        dec_w2=Tensor(unstack.copy(), requires_grad=True),
        dec_b2=Tensor(np.zeros(f), requires_grad=True),
        k_ts=Tensor(np.eye(f), requires_grad=True),
        mixer=Tensor(np.full((cfg.n_hist, cfg.n_fut), 1.0 / cfg.n_hist),
                     requires_grad=True),
    )
