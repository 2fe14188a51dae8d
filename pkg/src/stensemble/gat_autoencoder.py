"""Graph-attention autoencoder over the merged consensus graph.

Encoder: three GATv2 layers (tanh between layers), top-k pooling with
tanh gating, and two LSTM layers.  Two encoder paths share the recurrent
weights: the pooled path feeds the decoder, the full path (every node,
gated but not dropped) gives the latent rows that are clustered.

Decoder: unpool, two LSTM layers, three GATv2 layers.  The last GATv2
layer reconstructs the node features; the adjacency is reconstructed as
``sigmoid(P P^T)`` from the penultimate decoder representation ``P``.

Gradients are hand-derived and accumulated in reverse order through the
whole stack; ``kernels`` supplies the per-edge attention and recurrent
loops.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .base_cluster import Partition, _kmeans_core

CHECKPOINT_FORMAT = "stensemble-gae-v1"


# -- data holders ---------------------------------------------------------------


@dataclass
class GraphInput:
    A: np.ndarray
    X: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.indices.shape[0])

    def edge_list(self):
        rows = np.repeat(np.arange(self.T), np.diff(self.indptr))
        return list(zip(rows.tolist(), self.indices.tolist()))


def build_graph(A, X=None, tau_edge: float = 0.0) -> GraphInput:
    """Edges ``(i, j)`` with ``A[i, j] > tau_edge`` plus every self-loop.

    Node features default to the rows of ``A``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12) or A.min() < 0:
        raise ValueError("adjacency must be symmetric and non-negative")
    X = A.copy() if X is None else np.ascontiguousarray(X, dtype=np.float64)
    if X.shape[0] != A.shape[0]:
        raise ValueError("one feature row per node required")
    mask = A > tau_edge
    np.fill_diagonal(mask, True)
    indptr = np.concatenate([[0], np.cumsum(mask.sum(1))]).astype(np.int64)
    indices = np.nonzero(mask)[1].astype(np.int64)
    return GraphInput(A, X, indptr, indices)


@dataclass
class GatLayerParams:
    W_l: np.ndarray
    W_r: np.ndarray
    a: np.ndarray
    leaky_slope: float = 0.2


@dataclass
class RecurrentParams:
    W: np.ndarray  # (4h, d_in), gate blocks input, forget, cell, output
    U: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]


@dataclass
class TrainConfig:
    lam: float = 0.1
    epochs: int = 200
    step_size: float = 0.01
    centroid_refresh: int = 10
    pool_ratio: float = 0.5
    tau_edge: float = 0.0
    seed: int = 0
    k: int = 2
    dims: tuple | None = None
    leaky_slope: float = 0.2
    max_halvings: int = 30

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise ValueError("pool_ratio must lie in (0, 1]")
        if self.epochs < 0 or self.centroid_refresh < 1:
            raise ValueError("epochs must be >= 0 and centroid_refresh >= 1")
        if self.dims is not None:
            self.dims = tuple(int(d) for d in self.dims)
            if len(self.dims) != 4 or min(self.dims) < 1:
                raise ValueError("dims must be four positive widths (d1, d2, d3, d_z)")


def default_dims(f_node: int) -> tuple[int, int, int, int]:
    """(64, 32, 16, 8), shrunk when the node features are narrower than 64."""
    if f_node >= 64:
        return (64, 32, 16, 8)
    d1 = max(2, f_node)
    d2 = max(2, min(32, d1 // 2))
    d3 = max(2, min(16, d2 // 2))
    dz = max(2, min(8, d3 // 2))
    return (d1, d2, d3, dz)


GAT_LAYERS = ("enc.gat1", "enc.gat2", "enc.gat3", "dec.gat1", "dec.gat2", "dec.gat3")
REC_LAYERS = ("enc.rec1", "enc.rec2", "dec.rec1", "dec.rec2")


@dataclass
class AutoencoderParams:
    """Flat name -> array store with typed views for each layer."""

    blocks: dict
    f_node: int
    dims: tuple
    leaky_slope: float = 0.2

    def gat(self, name) -> GatLayerParams:
        b = self.blocks
        return GatLayerParams(b[name + ".W_l"], b[name + ".W_r"], b[name + ".a"], self.leaky_slope)

    def rec(self, name) -> RecurrentParams:
        b = self.blocks
        return RecurrentParams(b[name + ".W"], b[name + ".U"], b[name + ".b"])

    @property
    def pool(self) -> np.ndarray:
        return self.blocks["enc.pool.p"]

    def copy(self) -> "AutoencoderParams":
        return AutoencoderParams({k: v.copy() for k, v in self.blocks.items()},
                                 self.f_node, self.dims, self.leaky_slope)

    def axpy(self, step, grads) -> "AutoencoderParams":
        return AutoencoderParams({k: v - step * grads[k] for k, v in self.blocks.items()},
                                 self.f_node, self.dims, self.leaky_slope)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.blocks.values()))


def _layer_shapes(f_node, dims):
    d1, d2, d3, dz = dims
    gat = {
        "enc.gat1": (f_node, d1), "enc.gat2": (d1, d2), "enc.gat3": (d2, d3),
        "dec.gat1": (d3, d2), "dec.gat2": (d2, d1), "dec.gat3": (d1, f_node),
    }
    rec = {"enc.rec1": (d3, dz), "enc.rec2": (dz, dz), "dec.rec1": (dz, dz), "dec.rec2": (dz, d3)}
    return gat, rec


def init_params(f_node: int, cfg: TrainConfig) -> AutoencoderParams:
    """Seeded uniform(-s, s) with ``s = sqrt(6 / (d_in + d_out))`` per layer; zero biases."""
    dims = cfg.dims or default_dims(f_node)
    rng = np.random.default_rng(cfg.seed)
    gat, rec = _layer_shapes(f_node, dims)
    blocks = {}

    def uni(shape, fan):
        s = math.sqrt(6.0 / fan)
        return rng.uniform(-s, s, size=shape)

    for name in GAT_LAYERS[:3]:
        din, dout = gat[name]
        blocks[name + ".W_l"] = uni((dout, din), din + dout)
        blocks[name + ".W_r"] = uni((dout, din), din + dout)
        blocks[name + ".a"] = uni((dout,), dout + 1)
    blocks["enc.pool.p"] = uni((dims[2],), dims[2] + 1)
    for name in REC_LAYERS:
        din, h = rec[name]
        blocks[name + ".W"] = uni((4 * h, din), din + h)
        blocks[name + ".U"] = uni((4 * h, h), 2 * h)
        blocks[name + ".b"] = np.zeros(4 * h)
    for name in GAT_LAYERS[3:]:
        din, dout = gat[name]
        blocks[name + ".W_l"] = uni((dout, din), din + dout)
        blocks[name + ".W_r"] = uni((dout, din), din + dout)
        blocks[name + ".a"] = uni((dout,), dout + 1)
    return AutoencoderParams(blocks, f_node, tuple(dims), cfg.leaky_slope)


# -- layers -----------------------------------------------------------------------


def _gat_fwd(H, graph, lp: GatLayerParams):
    Lm = np.ascontiguousarray(H @ lp.W_l.T)
    Rm = np.ascontiguousarray(H @ lp.W_r.T)
    out, alpha = kernels.gat_forward(Lm, Rm, np.ascontiguousarray(lp.a), graph.indptr,
                                     graph.indices, lp.leaky_slope)
    return out, (H, Lm, Rm, alpha)


def _gat_bwd(G, cache, graph, lp: GatLayerParams):
    H, Lm, Rm, alpha = cache
    dL, dR, da = kernels.gat_backward(Lm, Rm, np.ascontiguousarray(lp.a), graph.indptr,
                                      graph.indices, lp.leaky_slope, alpha,
                                      np.ascontiguousarray(G))
    dW_l = dL.T @ H
    dW_r = dR.T @ H
    dH = dL @ lp.W_l + dR @ lp.W_r
    return dH, dW_l, dW_r, da


def attention_weights(H, graph: GraphInput, params: GatLayerParams) -> np.ndarray:
    """Per-edge attention coefficients, aligned with ``graph.indices``."""
    return _gat_fwd(np.asarray(H, dtype=np.float64), graph, params)[1][3]


def gatv2_layer(H, graph: GraphInput, params: GatLayerParams) -> np.ndarray:
    """Single-head GATv2: ``h'_i = sum_j softmax_j(a . leaky(W_l h_i + W_r h_j)) W_r h_j``."""
    return _gat_fwd(np.asarray(H, dtype=np.float64), graph, params)[0]


def topk_pool(H, p, ratio):
    """Keep the ``ceil(ratio * N)`` best-scoring rows, gated by ``tanh(score)``.

    Scores are ``H p / ||p||``; ties go to the lower index.  Kept indices are
    returned in ascending (temporal) order.
    """
    H = np.asarray(H, dtype=np.float64)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    n = H.shape[0]
    pn = float(np.linalg.norm(p))
    s = H @ p / pn if pn > 0 else np.zeros(n)
    keep = max(1, math.ceil(ratio * n - 1e-9))
    order = np.lexsort((np.arange(n), -s))
    kept = np.sort(order[:keep])
    return np.tanh(s[kept])[:, None] * H[kept], kept


def _pool_scores(H, p):
    pn = float(np.linalg.norm(p))
    return H @ p / pn, pn


def _rec_fwd(X, rp: RecurrentParams):
    XW = np.ascontiguousarray(X @ rp.W.T + rp.b)
    Hs, Cs, Acts = kernels.lstm_forward(XW, np.ascontiguousarray(rp.U))
    return Hs, (X, Hs, Cs, Acts)


def _rec_bwd(dH, cache, rp: RecurrentParams):
    X, Hs, Cs, Acts = cache
    dZ, dU = kernels.lstm_backward(np.ascontiguousarray(rp.U), Hs, Cs, Acts,
                                   np.ascontiguousarray(dH))
    return dZ @ rp.W, dZ.T @ X, dU, dZ.sum(0)


def recurrent_layer(sequence, params: RecurrentParams) -> np.ndarray:
    """LSTM over rows in order, zero initial state; returns per-step hidden states."""
    return _rec_fwd(np.asarray(sequence, dtype=np.float64), params)[0]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- forward / backward -------------------------------------------------------------


@dataclass
class ForwardCache:
    Z_full: np.ndarray
    Z_pooled: np.ndarray
    kept: np.ndarray
    X_hat: np.ndarray
    A_hat: np.ndarray
    store: dict = field(default_factory=dict)


def _encode(graph, params, cfg, store):
    H = graph.X
    for name in GAT_LAYERS[:3]:
        out, c = _gat_fwd(H, graph, params.gat(name))
        store[name] = c
        H = np.tanh(out)
        store[name + ".y"] = H
    H3 = H
    p = params.pool
    s, pn = _pool_scores(H3, p)
    g = np.tanh(s)
    G = g[:, None] * H3
    _, kept = topk_pool(H3, p, cfg.pool_ratio)
    store["pool"] = (H3, s, pn, g, kept)
    Z, c1 = _rec_fwd(G, params.rec("enc.rec1"))
    Z_full, c2 = _rec_fwd(Z, params.rec("enc.rec2"))
    store["full"] = (c1, c2)
    Zp, c1p = _rec_fwd(G[kept], params.rec("enc.rec1"))
    Z_pooled, c2p = _rec_fwd(Zp, params.rec("enc.rec2"))
    store["pooled"] = (c1p, c2p)
    return Z_full, Z_pooled, kept


def encode(graph: GraphInput, params: AutoencoderParams, cfg: TrainConfig):
    """Returns ``(Z_full, Z_pooled, kept_indices)``."""
    return _encode(graph, params, cfg, {})


def _decode(Z_pooled, kept, params, graph, store):
    T = graph.T
    U0 = np.zeros((T, Z_pooled.shape[1]))
    U0[kept] = Z_pooled
    D1, c1 = _rec_fwd(U0, params.rec("dec.rec1"))
    D2, c2 = _rec_fwd(D1, params.rec("dec.rec2"))
    store["dec.rec"] = (c1, c2)
    E1o, g1 = _gat_fwd(D2, graph, params.gat("dec.gat1"))
    E1 = np.tanh(E1o)
    E2o, g2 = _gat_fwd(E1, graph, params.gat("dec.gat2"))
    E2 = np.tanh(E2o)
    X_hat, g3 = _gat_fwd(E2, graph, params.gat("dec.gat3"))
    A_hat = _sigmoid(E2 @ E2.T)
    A_hat = 0.5 * (A_hat + A_hat.T)
    store["dec.gat"] = (g1, g2, g3, E1, E2)
    return X_hat, A_hat


def decode(Z_pooled, kept_indices, params: AutoencoderParams, graph: GraphInput):
    """Returns ``(X_hat, A_hat)`` for the full node set."""
    return _decode(np.asarray(Z_pooled, dtype=np.float64), np.asarray(kept_indices), params,
                   graph, {})


def forward(params: AutoencoderParams, graph: GraphInput, cfg: TrainConfig) -> ForwardCache:
    store = {}
    Z_full, Z_pooled, kept = _encode(graph, params, cfg, store)
    X_hat, A_hat = _decode(Z_pooled, kept, params, graph, store)
    return ForwardCache(Z_full, Z_pooled, kept, X_hat, A_hat, store)


def _assign(Z, centroids):
    d = ((Z[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(Z.shape[0]), idx]


def loss(X, A, X_hat, A_hat, Z_full, centroids, lam) -> float:
    """``MSE(X, X_hat) + MSE(A, A_hat) + lam * mean_i min_j ||z_i - mu_j||^2``."""
    rec = float(np.mean((X - X_hat) ** 2) + np.mean((A - A_hat) ** 2))
    if lam == 0 or centroids is None:
        return rec
    _, d = _assign(Z_full, centroids)
    return rec + lam * float(d.mean())


def cache_loss(cache: ForwardCache, graph: GraphInput, centroids, lam) -> float:
    return loss(graph.X, graph.A, cache.X_hat, cache.A_hat, cache.Z_full, centroids, lam)


def backward(cache: ForwardCache, params: AutoencoderParams, graph: GraphInput,
             centroids, lam) -> dict:
    """Gradient of :func:`loss` with respect to every parameter block."""
    st = cache.store
    grads = {k: np.zeros_like(v) for k, v in params.blocks.items()}
    T = graph.T

    dX_hat = 2.0 * (cache.X_hat - graph.X) / graph.X.size
    dA_hat = 2.0 * (cache.A_hat - graph.A) / graph.A.size

    g1, g2, g3, E1, E2 = st["dec.gat"]
    dE2, dWl, dWr, da = _gat_bwd(dX_hat, g3, graph, params.gat("dec.gat3"))
    _acc_gat(grads, "dec.gat3", dWl, dWr, da)
    dS = dA_hat * cache.A_hat * (1.0 - cache.A_hat)
    dE2 = dE2 + (dS + dS.T) @ E2
    dE1, dWl, dWr, da = _gat_bwd(dE2 * (1.0 - E2 * E2), g2, graph, params.gat("dec.gat2"))
    _acc_gat(grads, "dec.gat2", dWl, dWr, da)
    dD2, dWl, dWr, da = _gat_bwd(dE1 * (1.0 - E1 * E1), g1, graph, params.gat("dec.gat1"))
    _acc_gat(grads, "dec.gat1", dWl, dWr, da)

    c1, c2 = st["dec.rec"]
    dD1 = _acc_rec(grads, "dec.rec2", *_rec_bwd(dD2, c2, params.rec("dec.rec2")))
    dU0 = _acc_rec(grads, "dec.rec1", *_rec_bwd(dD1, c1, params.rec("dec.rec1")))
    kept = cache.kept
    dZp = dU0[kept]

    H3, s, pn, g, _ = st["pool"]
    dG = np.zeros_like(H3)
    c1p, c2p = st["pooled"]
    dZp1 = _acc_rec(grads, "enc.rec2", *_rec_bwd(dZp, c2p, params.rec("enc.rec2")))
    dGp = _acc_rec(grads, "enc.rec1", *_rec_bwd(dZp1, c1p, params.rec("enc.rec1")))
    dG[kept] += dGp

    if lam != 0 and centroids is not None:
        idx, _ = _assign(cache.Z_full, centroids)
        dZf = lam * 2.0 * (cache.Z_full - centroids[idx]) / T
        c1f, c2f = st["full"]
        dZf1 = _acc_rec(grads, "enc.rec2", *_rec_bwd(dZf, c2f, params.rec("enc.rec2")))
        dGf = _acc_rec(grads, "enc.rec1", *_rec_bwd(dZf1, c1f, params.rec("enc.rec1")))
        dG += dGf

    p = params.pool
    ds = (dG * H3).sum(1) * (1.0 - g * g)
    dH = g[:, None] * dG + np.outer(ds, p / pn)
    grads["enc.pool.p"] += (ds @ H3) / pn - (ds @ s) * p / (pn * pn)

    for name in ("enc.gat3", "enc.gat2", "enc.gat1"):
        y = st[name + ".y"]
        dH, dWl, dWr, da = _gat_bwd(dH * (1.0 - y * y), st[name], graph, params.gat(name))
        _acc_gat(grads, name, dWl, dWr, da)
    return grads


def _acc_gat(grads, name, dWl, dWr, da):
    grads[name + ".W_l"] += dWl
    grads[name + ".W_r"] += dWr
    grads[name + ".a"] += da


def _acc_rec(grads, name, dX, dW, dU, db):
    grads[name + ".W"] += dW
    grads[name + ".U"] += dU
    grads[name + ".b"] += db
    return dX


def loss_and_grad(params, graph, cfg, centroids):
    cache = forward(params, graph, cfg)
    val = cache_loss(cache, graph, centroids, cfg.lam)
    return val, backward(cache, params, graph, centroids, cfg.lam)


# -- training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: AutoencoderParams
    Z_full: np.ndarray
    centroids: np.ndarray | None
    loss_history: list[float]
    epoch: int


def _refresh_centroids(Z, k, seed):
    k = min(k, Z.shape[0])
    _, C, _ = _kmeans_core(Z, k, seed)
    return C


def train(graph: GraphInput, cfg: TrainConfig, init: AutoencoderParams | None = None,
          start_epoch: int = 0, centroids=None, callback=None) -> TrainResult:
    """Full-batch gradient descent on the joint loss.

    Each epoch takes one step of ``cfg.step_size``; if the step raises the
    loss it is halved (up to ``cfg.max_halvings`` times) for that epoch
    only.  Centroids are refreshed by k-means on ``Z_full`` every
    ``cfg.centroid_refresh`` epochs, starting at epoch 0.
    """
    params = init.copy() if init is not None else init_params(graph.X.shape[1], cfg)
    cache = forward(params, graph, cfg)
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.lam > 0 and (epoch % cfg.centroid_refresh == 0 or centroids is None):
            centroids = _refresh_centroids(cache.Z_full, cfg.k, cfg.seed)
        cur = cache_loss(cache, graph, centroids, cfg.lam)
        if not np.isfinite(cur):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        history.append(cur)
        grads = backward(cache, params, graph, centroids, cfg.lam)
        step = cfg.step_size
        for _ in range(cfg.max_halvings + 1):
            trial = params.axpy(step, grads)
            tcache = forward(trial, graph, cfg)
            tloss = cache_loss(tcache, graph, centroids, cfg.lam)
            if np.isfinite(tloss) and tloss <= cur:
                break
            step *= 0.5
        else:
            trial, tcache = params, cache
        params, cache = trial, tcache
        if callback is not None:
            callback(epoch, params, centroids, cur)
    final = cache_loss(cache, graph, centroids, cfg.lam)
    if not np.isfinite(final):
        raise FloatingPointError(f"non-finite loss at epoch {cfg.epochs}")
    history.append(final)
    return TrainResult(params, cache.Z_full, centroids, history, cfg.epochs)


def cluster_latent(Z_full, k: int, seed: int = 0, n_init: int = 1) -> Partition:
    """k-means on the latent rows; the pipeline's final partition."""
    Z = np.asarray(Z_full, dtype=np.float64)
    if k > Z.shape[0]:
        raise ValueError("k exceeds the number of latent rows")
    labels, _, _ = _kmeans_core(Z, k, seed, n_init=n_init)
    return Partition(labels, k, f"latent-kmeans:k={k}:seed={seed}")


# -- checkpoints --------------------------------------------------------------------------


def save_checkpoint(directory, params: AutoencoderParams, cfg: TrainConfig, epoch: int,
                    centroids=None) -> None:
    """``params.bin`` (little-endian float64 blocks) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = []
    offset = 0
    chunks = []
    for name, arr in params.blocks.items():
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.asarray(arr, dtype="<f8").ravel())
    if centroids is not None:
        blocks.append({"name": "centroids", "shape": list(centroids.shape), "offset": offset})
        offset += centroids.size
        chunks.append(np.asarray(centroids, dtype="<f8").ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / "params.bin").write_bytes(flat.astype("<f8").tobytes())
    cfg_d = asdict(cfg)
    cfg_d["dims"] = list(params.dims)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "f_node": params.f_node,
        "dims": list(params.dims),
        "leaky_slope": params.leaky_slope,
        "seed": cfg.seed,
        "epoch": epoch,
        "n_values": int(offset),
        "blocks": blocks,
        "config": cfg_d,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Returns ``(params, manifest, centroids_or_None)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("unrecognised checkpoint format")
    flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["n_values"]:
        raise ValueError("checkpoint size does not match its manifest")
    blocks = {}
    centroids = None
    for b in manifest["blocks"]:
        size = int(np.prod(b["shape"])) if b["shape"] else 1
        arr = flat[b["offset"]:b["offset"] + size].reshape(b["shape"]).astype(np.float64)
        if b["name"] == "centroids":
            centroids = arr
        else:
            blocks[b["name"]] = arr
    params = AutoencoderParams(blocks, manifest["f_node"], tuple(manifest["dims"]),
                               manifest["leaky_slope"])
    return params, manifest, centroids


def resume_training(directory, graph: GraphInput, epochs: int | None = None) -> TrainResult:
    """Continue training from a checkpoint up to ``epochs`` (default: the saved config's)."""
    params, manifest, centroids = load_checkpoint(directory)
    cfg_d = dict(manifest["config"])
    if epochs is not None:
        cfg_d["epochs"] = epochs
    cfg = TrainConfig(**cfg_d)
    return train(graph, cfg, init=params, start_epoch=manifest["epoch"], centroids=centroids)
