"""Internal validation scores for a partition of a feature matrix.

All distances are Euclidean.  Degenerate cases return ``inf`` rather than
raising, so a report can always be written.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .base_cluster import Partition, pairwise_dists
from .ingest import FeatureMatrix

REPORT_KEYS = {
    "silhouette": "silhouette",
    "davies_bouldin": "db",
    "calinski_harabasz": "ch",
    "avg_rmse": "rmse",
    "avg_variance": "var",
    "inter_cluster_distance": "icd",
}


def _xy(m, p):
    X = m.data if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)
    labels = p.labels if isinstance(p, Partition) else np.asarray(p, dtype=np.int64)
    if X.shape[0] != labels.shape[0]:
        raise ValueError("partition length does not match the number of rows")
    # compact ids so that unused ids never show up as empty clusters
    _, labels = np.unique(labels, return_inverse=True)
    return X, labels.astype(np.int64)


def _centroids(X, labels, k):
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    return sums / counts[:, None], counts


def silhouette(m, p) -> float:
    """Mean silhouette width; singleton clusters contribute 0."""
    X, labels = _xy(m, p)
    k = labels.max() + 1
    if k < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = pairwise_dists(X)
    counts = np.bincount(labels, minlength=k)
    onehot = np.zeros((X.shape[0], k))
    onehot[np.arange(X.shape[0]), labels] = 1.0
    sums = D @ onehot
    own = counts[labels]
    a = np.where(own > 1, sums[np.arange(len(labels)), labels] / np.maximum(own - 1, 1), 0.0)
    other = sums / counts[None, :]
    other[np.arange(len(labels)), labels] = np.inf
    b = other.min(1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def davies_bouldin(m, p) -> float:
    X, labels = _xy(m, p)
    k = labels.max() + 1
    if k < 2:
        raise ValueError("Davies-Bouldin needs at least two clusters")
    C, _ = _centroids(X, labels, k)
    spread = np.zeros(k)
    np.add.at(spread, labels, np.linalg.norm(X - C[labels], axis=1))
    spread /= np.bincount(labels, minlength=k)
    cd = pairwise_dists(C)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (spread[:, None] + spread[None, :]) / cd
    ratio[cd == 0] = np.inf
    np.fill_diagonal(ratio, -np.inf)
    return float(ratio.max(1).mean())


def calinski_harabasz(m, p) -> float:
    X, labels = _xy(m, p)
    n = X.shape[0]
    k = labels.max() + 1
    if k < 2:
        raise ValueError("Calinski-Harabasz needs at least two clusters")
    C, counts = _centroids(X, labels, k)
    grand = X.mean(0)
    between = float((counts * ((C - grand) ** 2).sum(1)).sum())
    within = float(((X - C[labels]) ** 2).sum())
    if within == 0 or n == k:
        return float("inf")
    return (between / (k - 1)) / (within / (n - k))


def _per_cluster_msd(X, labels):
    k = labels.max() + 1
    C, counts = _centroids(X, labels, k)
    sq = np.zeros(k)
    np.add.at(sq, labels, ((X - C[labels]) ** 2).sum(1))
    return sq / counts


def avg_rmse(m, p) -> float:
    X, labels = _xy(m, p)
    return float(np.sqrt(_per_cluster_msd(X, labels)).mean())


def avg_variance(m, p) -> float:
    X, labels = _xy(m, p)
    return float(_per_cluster_msd(X, labels).mean())


def inter_cluster_distance(m, p) -> float:
    """Mean over cluster pairs of the closest cross-cluster point distance."""
    X, labels = _xy(m, p)
    k = labels.max() + 1
    if k < 2:
        raise ValueError("inter-cluster distance needs at least two clusters")
    mins = []
    for i in range(k):
        Xi = X[labels == i]
        for j in range(i + 1, k):
            mins.append(pairwise_dists(Xi, X[labels == j]).min())
    return float(np.mean(mins))


@dataclass
class MetricReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    avg_rmse: float
    avg_variance: float
    inter_cluster_distance: float
    k: int
    n: int

    def to_json_dict(self) -> dict:
        d = asdict(self)
        out = {REPORT_KEYS[name]: d[name] for name in REPORT_KEYS}
        out["k"] = self.k
        out["n"] = self.n
        return out


def evaluate(m, p) -> MetricReport:
    X, labels = _xy(m, p)
    return MetricReport(
        silhouette=silhouette(X, labels),
        davies_bouldin=davies_bouldin(X, labels),
        calinski_harabasz=calinski_harabasz(X, labels),
        avg_rmse=avg_rmse(X, labels),
        avg_variance=avg_variance(X, labels),
        inter_cluster_distance=inter_cluster_distance(X, labels),
        k=int(labels.max() + 1),
        n=int(X.shape[0]),
    )
