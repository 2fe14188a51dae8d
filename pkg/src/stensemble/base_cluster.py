"""Base clustering algorithms and distortion-elbow selection of k.

All three algorithms use Euclidean geometry and are deterministic given
(input, config, seed).  Labels are canonicalised so that cluster ids
appear in order of first occurrence along the time axis.
"""

from __future__ import annotations

import hashlib
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .ingest import FeatureMatrix

ALGORITHMS = ("kmeans", "agglomerative", "spectral")


@dataclass
class Partition:
    labels: np.ndarray
    k: int
    source_tag: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be 1D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def is_complete(self) -> bool:
        """True when every cluster id in ``[0, k)`` is used."""
        return np.unique(self.labels).size == self.k

    @classmethod
    def from_labels(cls, labels, source_tag=""):
        lab = canonical_labels(labels)
        k = int(lab.max()) + 1 if lab.size else 0
        return cls(lab, k, source_tag)


def canonical_labels(labels) -> np.ndarray:
    """Relabel so ids are numbered by first appearance."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


@dataclass(frozen=True)
class ClusterModelConfig:
    algorithm: str = "kmeans"
    k: int = 2
    seed: int = 0
    max_iter: int = 300
    tol: float = 1e-6
    linkage: str = "average"
    n_init: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.linkage not in ("average", "ward"):
            raise ValueError(f"unknown linkage {self.linkage!r}")
        if self.max_iter < 1 or self.n_init < 1:
            raise ValueError("max_iter and n_init must be positive")

    def with_(self, **kw) -> "ClusterModelConfig":
        return replace(self, **kw)

    @property
    def tag(self) -> str:
        extra = f":{self.linkage}" if self.algorithm == "agglomerative" else ""
        return f"{self.algorithm}{extra}:k={self.k}:seed={self.seed}"


def _as_array(m) -> np.ndarray:
    return m.data if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)


def sq_dists(X, C):
    """Squared Euclidean distances between the rows of X and C, clipped at 0."""
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def pairwise_dists(X, Y=None):
    """Exact Euclidean distance matrix, computed in row blocks to bound memory."""
    Y = X if Y is None else Y
    out = np.empty((X.shape[0], Y.shape[0]))
    step = max(1, 4_000_000 // max(1, Y.shape[0] * X.shape[1]))
    for s in range(0, X.shape[0], step):
        diff = X[s:s + step, None, :] - Y[None, :, :]
        out[s:s + step] = np.sqrt((diff * diff).sum(-1))
    return out


def _distortion(X, labels, C):
    diff = X - C[labels]
    return float((diff * diff).sum())


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers[c] = X[idx]
        closest = np.minimum(closest, ((X - centers[c]) ** 2).sum(1))
    return centers


def _repair_empty(X, labels, k):
    # Move the farthest member of the largest cluster into each empty cluster.
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        cent = X[members].mean(0)
        far = members[int(np.argmax(((X[members] - cent) ** 2).sum(1)))]
        labels[far] = empty[0]
    return labels


def _lloyd(X, k, rng, max_iter, tol):
    C = _kmeanspp(X, k, rng)
    prev = np.inf
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        labels = np.argmin(sq_dists(X, C), axis=1).astype(np.int64)
        labels = _repair_empty(X, labels, k)
        newC = np.array([X[labels == j].mean(0) for j in range(k)])
        dist = _distortion(X, labels, newC)
        assert dist <= prev * (1 + 1e-12) + 1e-12, "kmeans distortion increased"
        prev = dist
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        C = newC
        if shift < tol:
            break
    return labels, C, prev


def _kmeans_core(X, k, seed, max_iter=300, tol=1e-6, n_init=1):
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(X, k, rng, max_iter, tol)
        if best is None or res[2] < best[2]:
            best = res
    labels, C, dist = best
    canon = canonical_labels(labels)
    # permute centroids to follow the canonical ids
    perm = np.empty(k, dtype=np.int64)
    perm[canon] = labels
    return canon, C[perm], dist


def kmeans(m, cfg: ClusterModelConfig):
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(partition, centroids, distortion)`` where the distortion is
    the sum of squared distances to the assigned centroids.
    """
    X = _as_array(m)
    if cfg.k > np.unique(X, axis=0).shape[0]:
        raise ValueError("k exceeds distinct points")
    labels, C, dist = _kmeans_core(X, cfg.k, cfg.seed, cfg.max_iter, cfg.tol, cfg.n_init)
    return Partition(labels, cfg.k, cfg.tag), C, dist


def linkage_labels(dist, k, method="average"):
    """Cut an agglomerative merge sequence at ``k`` clusters.

    ``dist`` is a full symmetric distance matrix; for ``method="ward"`` it
    must hold Euclidean distances (squared internally).
    """
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    ward = method == "ward"
    rep = kernels.linkage_cut(dist * dist if ward else dist, k, ward)
    return canonical_labels(rep)


def agglomerative(m, cfg: ClusterModelConfig) -> Partition:
    """Bottom-up merging under average or Ward linkage on Euclidean distances."""
    X = _as_array(m)
    labels = linkage_labels(pairwise_dists(X), cfg.k, cfg.linkage)
    return Partition(labels, cfg.k, cfg.tag)


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in ascending order with matching eigenvector
    columns.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("square matrix required")
    w, V, _ = kernels.jacobi_eigh(A, tol, max_sweeps)
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


_EMBED_CACHE: "OrderedDict[tuple, np.ndarray]" = OrderedDict()
_EMBED_CACHE_SIZE = 8
_EMBED_LOCK = threading.Lock()


def spectral_embedding(X, k):
    """Row-normalised bottom-k eigenvectors of the symmetric normalised Laplacian."""
    key = (hashlib.sha1(np.ascontiguousarray(X).tobytes()).hexdigest(), X.shape, k,
           kernels.BACKEND)
    with _EMBED_LOCK:
        if key in _EMBED_CACHE:
            _EMBED_CACHE.move_to_end(key)
            return _EMBED_CACHE[key].copy()
    D = pairwise_dists(X)
    iu = np.triu_indices(X.shape[0], 1)
    sigma = float(np.median(D[iu])) if iu[0].size else 0.0
    if sigma <= 0:
        sigma = 1.0
    A = np.exp(-(D * D) / (2.0 * sigma * sigma))
    np.fill_diagonal(A, 0.0)
    deg = A.sum(1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(X.shape[0]) - inv[:, None] * A * inv[None, :]
    lap = 0.5 * (lap + lap.T)
    _, V = jacobi_eigh(lap)
    emb = V[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.where(norms > 0, norms, 1.0)
    with _EMBED_LOCK:
        _EMBED_CACHE[key] = emb
        if len(_EMBED_CACHE) > _EMBED_CACHE_SIZE:
            _EMBED_CACHE.popitem(last=False)
    return emb.copy()


def spectral(m, cfg: ClusterModelConfig) -> Partition:
    """Normalised spectral clustering (Gaussian affinity, median-distance bandwidth)."""
    X = _as_array(m)
    if X.shape[0] < cfg.k:
        raise ValueError("spectral clustering needs at least k points")
    emb = spectral_embedding(X, cfg.k)
    labels, _, _ = _kmeans_core(emb, cfg.k, cfg.seed, cfg.max_iter, cfg.tol, cfg.n_init)
    return Partition(labels, cfg.k, cfg.tag)


def run_algorithm(m, cfg: ClusterModelConfig) -> Partition:
    if cfg.algorithm == "kmeans":
        return kmeans(m, cfg)[0]
    if cfg.algorithm == "agglomerative":
        return agglomerative(m, cfg)
    return spectral(m, cfg)


@dataclass
class ElbowResult:
    k: int
    ks: list[int]
    distortions: list[float]
    distances: list[float]
    warnings: list[str] = field(default_factory=list)


def knee_from_curve(ks, distortions):
    """Index of the point farthest from the chord joining the curve's endpoints.

    Both axes are rescaled to [0, 1] first; ties (including a perfectly
    straight curve) resolve to the smallest k.
    """
    x = np.asarray(ks, dtype=np.float64)
    y = np.asarray(distortions, dtype=np.float64)
    xs = (x - x[0]) / (x[-1] - x[0])
    yr = y.max() - y.min()
    ys = (y - y.min()) / yr if yr > 0 else np.zeros_like(y)
    x0, y0, x1, y1 = xs[0], ys[0], xs[-1], ys[-1]
    norm = np.hypot(x1 - x0, y1 - y0)
    dist = np.abs((y1 - y0) * xs - (x1 - x0) * ys + x1 * y0 - y1 * x0) / norm
    best = dist.max()
    return int(np.flatnonzero(dist >= best - 1e-12)[0]), dist


def elbow_select_k(m, k_min: int, k_max: int, seed: int = 0, n_init: int = 1) -> ElbowResult:
    """Distortion-score elbow over ``k_min..k_max`` with the max-distance-to-chord rule."""
    X = _as_array(m)
    if not (2 <= k_min < k_max <= X.shape[0]):
        raise ValueError("need 2 <= k_min < k_max <= T")
    ks = list(range(k_min, k_max + 1))
    n_distinct = np.unique(X, axis=0).shape[0]
    dists = []
    for k in ks:
        if k >= n_distinct:
            # every distinct point can sit on its own centroid
            dists.append(0.0)
            continue
        _, _, d = kmeans(X, ClusterModelConfig("kmeans", k, seed, n_init=n_init))
        dists.append(d)
    notes = []
    for a, b, ka in zip(dists, dists[1:], ks):
        if b > a * 1.05:
            notes.append(f"distortion rose by more than 5% from k={ka} to k={ka + 1}")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    idx, dist = knee_from_curve(ks, dists)
    return ElbowResult(ks[idx], ks, dists, dist.tolist(), notes)
