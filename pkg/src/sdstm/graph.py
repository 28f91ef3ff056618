"""Spatial modules: prior-graph convolution, similarity attention, gated fusion.

Windows are (time x node) with one scalar channel per node. The stable module
propagates along the symmetrically normalized weighted road adjacency; the
dynamic module runs nonnegative-similarity attention between nodes at every
timestep; fusion blends the two through a sigmoid MLP followed by
squeeze-and-excitation rescaling over the node channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError

_NORM_EPS = 1e-24  # inside sqrt when normalizing query/key rows


def normalize_adjacency(adjacency: np.ndarray, alpha: float) -> np.ndarray:
    """D~^{-1/2} (alpha A + (1-alpha) I) D~^{-1/2} with degree of the blended matrix."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if (a < 0).any():
        raise DataError("adjacency weights must be nonnegative")
    blended = alpha * a + (1.0 - alpha) * np.eye(a.shape[0])
    deg = blended.sum(axis=1)
    if (deg <= 0).any():
        bad = int(np.argmin(deg))
        raise DataError(f"node {bad} has zero degree after blending (isolated with alpha={alpha})")
    inv_sqrt = 1.0 / np.sqrt(deg)
    return inv_sqrt[:, None] * blended * inv_sqrt[None, :]


@dataclass
class RoadGraph:
    node_ids: list
    adjacency: np.ndarray
    _normalized: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        n = len(self.node_ids)
        if a.shape != (n, n):
            raise DataError(f"adjacency shape {a.shape} does not match {n} nodes")
        if not np.allclose(a, a.T, atol=1e-12):
            raise DataError("adjacency must be symmetric")
        if np.abs(np.diag(a)).max(initial=0.0) > 0:
            raise DataError("adjacency diagonal must be zero (no self loops)")
        if (a < 0).any():
            raise DataError("adjacency weights must be nonnegative")
        self.adjacency = a

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    def normalized(self, alpha: float) -> np.ndarray:
        key = round(float(alpha), 12)
        if key not in self._normalized:
            self._normalized[key] = normalize_adjacency(self.adjacency, alpha)
        return self._normalized[key]

    def subgraph(self, keep: list) -> "RoadGraph":
        idx = np.asarray(keep, dtype=np.intp)
        return RoadGraph(node_ids=[self.node_ids[i] for i in idx],
                         adjacency=self.adjacency[np.ix_(idx, idx)])


def load_graph_json(path) -> RoadGraph:
    """Read {"nodes": [...], "edges": [[i, j, w], ...]}; edges reference node
    ids, are symmetrized (max weight wins), and self edges are dropped."""
    with open(path) as fh:
        payload = json.load(fh)
    try:
        node_ids = list(payload["nodes"])
        edges = payload["edges"]
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: graph file needs 'nodes' and 'edges'") from e
    index = {nid: k for k, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise DataError(f"{path}: duplicate node ids")
    a = np.zeros((len(node_ids), len(node_ids)))
    for edge in edges:
        try:
            i, j, w = edge
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}: edge entries must be [i, j, weight], got {edge!r}") from e
        if i not in index or j not in index:
            raise DataError(f"{path}: edge {edge!r} references unknown node")
        if i == j:
            continue
        w = float(w)
        if w < 0:
            raise DataError(f"{path}: negative edge weight in {edge!r}")
        ii, jj = index[i], index[j]
        a[ii, jj] = a[jj, ii] = max(a[ii, jj], w)
    return RoadGraph(node_ids=node_ids, adjacency=a)


def save_graph_json(path, graph: RoadGraph):
    edges = []
    n = graph.node_count
    for i in range(n):
        for j in range(i + 1, n):
            w = graph.adjacency[i, j]
            if w > 0:
                edges.append([graph.node_ids[i], graph.node_ids[j], float(w)])
    with open(path, "w") as fh:
        json.dump({"nodes": graph.node_ids, "edges": edges}, fh, indent=1)


# ---- parameters ---------------------------------------------------------------


@dataclass
class GCNParams:
    weights: list  # per-layer (c_in, c_out) tensors; ReLU between, linear last


@dataclass
class AttentionParams:
    w_q: Tensor   # (1, embed)
    w_k: Tensor   # (1, embed)
    w_v: Tensor   # (1, heads): one scalar value projection per head
    heads: int

    def __post_init__(self):
        if self.w_q.shape[1] % self.heads != 0:
            raise ValueError(f"embed width {self.w_q.shape[1]} not divisible by {self.heads} heads")


@dataclass
class FusionParams:
    mlp_w1: Tensor  # (2N, hidden)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (hidden, N)
    mlp_b2: Tensor
    se_w1: Tensor   # (N, bottleneck)
    se_b1: Tensor
    se_w2: Tensor   # (bottleneck, N)
    se_b2: Tensor


@dataclass
class SpatialParams:
    """Per-block spatial stack. The GCN and attention modules are shared by
    the two temporal streams; each stream fuses with its own weights."""
    gcn: GCNParams
    attn: AttentionParams
    fuse_ts: FusionParams
    fuse_td: FusionParams


def _xavier(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[0] if len(shape) > 1 else 1
    fan_out = shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_spatial(rng: np.random.Generator, n_nodes: int, gcn_hidden: int = 16,
                 gcn_layers: int = 2, attn_dim: int = 16, heads: int = 4,
                 fusion_hidden: int | None = None, se_ratio: int = 4) -> SpatialParams:
    dims = [1] + [gcn_hidden] * (gcn_layers - 1) + [1]
    gcn = GCNParams(weights=[Tensor(_xavier(rng, (dims[i], dims[i + 1])), requires_grad=True)
                             for i in range(gcn_layers)])
    attn = AttentionParams(
        w_q=Tensor(_xavier(rng, (1, attn_dim)), requires_grad=True),
        w_k=Tensor(_xavier(rng, (1, attn_dim)), requires_grad=True),
        w_v=Tensor(_xavier(rng, (1, heads)), requires_grad=True),
        heads=heads,
    )
    m = fusion_hidden or max(4, n_nodes)
    r = max(1, n_nodes // se_ratio)

    def fusion():
        return FusionParams(
            mlp_w1=Tensor(_xavier(rng, (2 * n_nodes, m)), requires_grad=True),
            mlp_b1=Tensor(np.zeros(m), requires_grad=True),
            mlp_w2=Tensor(_xavier(rng, (m, n_nodes)), requires_grad=True),
            mlp_b2=Tensor(np.zeros(n_nodes), requires_grad=True),
            se_w1=Tensor(_xavier(rng, (n_nodes, r)), requires_grad=True),
            se_b1=Tensor(np.zeros(r), requires_grad=True),
            se_w2=Tensor(_xavier(rng, (r, n_nodes)), requires_grad=True),
            # start near pass-through so SE does not crush early training
            se_b2=Tensor(np.full(n_nodes, 2.0), requires_grad=True),
        )

    return SpatialParams(gcn=gcn, attn=attn, fuse_ts=fusion(), fuse_td=fusion())


# ---- forward modules -----------------------------------------------------------


def space_stable(x: Tensor, a_hat: np.ndarray, params: GCNParams) -> Tensor:
    """Stacked graph convolution, shared weights applied at every timestep."""
    t, n = x.shape
    if a_hat.shape != (n, n):
        raise ValueError(f"window has {n} nodes but normalized adjacency is {a_hat.shape}")
    prop = Tensor(a_hat)
    h = ad.reshape(x, (t, n, 1))
    for layer, w in enumerate(params.weights):
        h = ad.matmul(prop, h)
        h = ad.matmul(h, w)
        if layer < len(params.weights) - 1:
            h = ad.relu(h)
    if h.shape[-1] != 1:
        raise ValueError("final GCN layer must map back to one channel")
    return ad.reshape(h, (t, n))


def _qkv(x: Tensor, params: AttentionParams):
    t, n = x.shape
    heads = params.heads
    dh = params.w_q.shape[1] // heads
    x3 = ad.reshape(x, (t, n, 1))
    q = ad.transpose(ad.reshape(ad.matmul(x3, params.w_q), (t, n, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(ad.matmul(x3, params.w_k), (t, n, heads, dh)), (0, 2, 1, 3))
    v = ad.reshape(ad.transpose(ad.matmul(x3, params.w_v), (0, 2, 1)), (t, heads, n, 1))
    return q, k, v


def _unit_rows(q: Tensor) -> Tensor:
    # zero rows stay zero; the epsilon never moves a nonzero norm measurably
    s = ad.tsum(q * q, axis=-1, keepdims=True)
    return q * ad.power(s + _NORM_EPS, -0.5)


def space_dynamic(x: Tensor, params: AttentionParams) -> Tensor:
    """All-pair propagation with similarity 1 + q_hat . k_hat, evaluated via
    the grouped linear-complexity form (never materializes the N x N matrix)."""
    t, n = x.shape
    q, k, v = _qkv(x, params)
    qn = _unit_rows(q)
    kn = _unit_rows(k)
    ksum = ad.tsum(kn, axis=2, keepdims=True)                      # (t, h, 1, dh)
    vsum = ad.tsum(v, axis=2, keepdims=True)                       # (t, h, 1, 1)
    kv = ad.matmul(ad.transpose(kn, (0, 1, 3, 2)), v)              # (t, h, dh, 1)
    numer = vsum + ad.matmul(qn, kv)                               # (t, h, n, 1)
    denom = float(n) + ad.matmul(qn, ad.transpose(ksum, (0, 1, 3, 2)))
    out = ad.tmean(numer / denom, axis=1)                          # (t, n, 1)
    return ad.reshape(out, (t, n))


def space_dynamic_dense(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Reference evaluation with the explicit pairwise weight matrix.

    Independent of the autodiff path; used as the oracle for the grouped form
    and to assert weight nonnegativity.
    """
    x = np.asarray(x, dtype=np.float64)
    t, n = x.shape
    heads = params.heads
    dh = params.w_q.shape[1] // heads
    w_q, w_k, w_v = params.w_q.data, params.w_k.data, params.w_v.data
    out = np.zeros((t, n))
    for h in range(heads):
        q = x[:, :, None] * w_q[0, h * dh:(h + 1) * dh]            # (t, n, dh)
        k = x[:, :, None] * w_k[0, h * dh:(h + 1) * dh]
        v = x * w_v[0, h]                                          # (t, n)
        qn = q / np.sqrt((q * q).sum(-1, keepdims=True) + _NORM_EPS)
        kn = k / np.sqrt((k * k).sum(-1, keepdims=True) + _NORM_EPS)
        omega = 1.0 + np.einsum("tid,tjd->tij", qn, kn)
        assert omega.min() >= -1e-12, "similarity weights must be nonnegative"
        out += np.einsum("tij,tj->ti", omega, v) / omega.sum(-1)
    return out / heads


def fuse_spatial(x_ss: Tensor, x_sd: Tensor, params: FusionParams) -> Tensor:
    return _fusion_parts(x_ss, x_sd, params)[-1]


def _fusion_parts(x_ss: Tensor, x_sd: Tensor, params: FusionParams):
    """Returns (beta, pre_se, se_scales, output); exposed for diagnostics."""
    if x_ss.shape != x_sd.shape:
        raise ValueError(f"fusion inputs disagree: {x_ss.shape} vs {x_sd.shape}")
    cat = ad.concat([x_ss, x_sd], axis=1)
    hidden = ad.relu(ad.matmul(cat, params.mlp_w1) + params.mlp_b1)
    beta = ad.sigmoid(ad.matmul(hidden, params.mlp_w2) + params.mlp_b2)
    pre_se = beta * x_ss + (1.0 - beta) * x_sd
    pooled = ad.tmean(pre_se, axis=0, keepdims=True)               # (1, n)
    squeeze = ad.relu(ad.matmul(pooled, params.se_w1) + params.se_b1)
    scales = ad.sigmoid(ad.matmul(squeeze, params.se_w2) + params.se_b2)
    return beta, pre_se, scales, pre_se * scales
