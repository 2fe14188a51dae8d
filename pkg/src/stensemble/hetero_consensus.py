"""Consolidation of per-algorithm partitions into one merged adjacency.

Two consensus routes are combined: the co-association matrix (with
thresholding and degree normalisation) and a symmetric tri-factorisation
``M ~ Q S Q^T`` of the mean connectivity matrix.  The factor ``Q`` is
zero-padded to ``T x T`` and added to the co-association matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base_cluster import Partition, jacobi_eigh
from .homo_ensemble import EnsembleRun

DENOM_GUARD = 1e-12
NNDSVD_FILL = 1e-6
KINDS = ("co_association", "connectivity", "merged", "nmf_u")


@dataclass
class ConsensusMatrix:
    data: np.ndarray
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError("consensus matrix must be square")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    @property
    def T(self) -> int:
        return self.data.shape[0]


@dataclass
class NmfFactors:
    Q: np.ndarray
    S: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    backtracks: int = 0

    @property
    def r(self) -> int:
        return self.Q.shape[1]


@dataclass(frozen=True)
class PostProcessConfig:
    min_threshold: float = 0.3
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 <= self.min_threshold < 1.0:
            raise ValueError("min_threshold must lie in [0, 1)")


def _as_run(partitions) -> EnsembleRun:
    if isinstance(partitions, EnsembleRun):
        return partitions
    if isinstance(partitions, Partition):
        return EnsembleRun([partitions])
    return EnsembleRun(list(partitions))


def _co_counts(labels: np.ndarray) -> np.ndarray:
    """Integer count of partitions co-clustering each pair; ``labels`` is ``M x T``."""
    M, T = labels.shape
    counts = np.zeros((T, T), dtype=np.int64)
    for row in labels:
        k = int(row.max()) + 1
        onehot = np.zeros((T, k), dtype=np.int64)
        onehot[np.arange(T), row] = 1
        counts += onehot @ onehot.T
    return counts


def co_association(partitions) -> ConsensusMatrix:
    """Fraction of member partitions placing each pair in the same cluster."""
    run = _as_run(partitions)
    counts = _co_counts(run.label_matrix())
    return ConsensusMatrix(counts / run.M, "co_association")


def connectivity(p: Partition) -> ConsensusMatrix:
    """0/1 co-membership matrix of a single partition."""
    lab = p.labels
    return ConsensusMatrix((lab[:, None] == lab[None, :]).astype(np.float64), "connectivity")


def post_process(cm: ConsensusMatrix, cfg: PostProcessConfig = PostProcessConfig()) -> ConsensusMatrix:
    """Zero co-association entries below ``min_threshold``, then degree-normalise.

    Normalisation is ``D^{-1/2} CM D^{-1/2}`` with ``D`` the row sums of the
    thresholded matrix; zero rows stay zero.
    """
    X = cm.data.copy()
    if cfg.min_threshold > 0:
        X[X < cfg.min_threshold] = 0.0
    if cfg.normalize:
        deg = X.sum(1)
        inv = np.zeros_like(deg)
        nz = deg > 0
        inv[nz] = 1.0 / np.sqrt(deg[nz])
        X = inv[:, None] * X * inv[None, :]
        X = 0.5 * (X + X.T)
    return ConsensusMatrix(X, cm.kind)


def partition_distance(p1: Partition, p2: Partition) -> int:
    """Ordered pairs co-clustered in ``p1`` but separated in ``p2``."""
    if len(p1) != len(p2):
        raise ValueError("partition lengths differ")
    a = p1.labels[:, None] == p1.labels[None, :]
    b = p2.labels[:, None] == p2.labels[None, :]
    return int(np.sum(a & ~b))


def nndsvd(M: np.ndarray, r: int, fill: float = NNDSVD_FILL):
    """NNDSVD start for ``M ~ W H`` with the SVD taken from Jacobi on ``M^T M``.

    Returns ``(W, H)``; exact zeros are left in place (the caller fills them).
    """
    T = M.shape[0]
    w, V = jacobi_eigh(M.T @ M)
    w = w[::-1]
    V = V[:, ::-1]
    W = np.zeros((M.shape[0], r))
    H = np.zeros((r, M.shape[1]))
    for i in range(r):
        sigma = float(np.sqrt(max(w[i], 0.0)))
        v = V[:, i]
        if sigma <= 1e-14 * max(1.0, float(np.sqrt(max(w[0], 0.0)))):
            continue
        u = M @ v / sigma
        if i == 0:
            # leading singular pair can be taken non-negative
            W[:, 0] = np.sqrt(sigma) * np.abs(u)
            H[0] = np.sqrt(sigma) * np.abs(v)
            continue
        up, un = np.maximum(u, 0), np.maximum(-u, 0)
        vp, vn = np.maximum(v, 0), np.maximum(-v, 0)
        nup, nun = np.linalg.norm(up), np.linalg.norm(un)
        nvp, nvn = np.linalg.norm(vp), np.linalg.norm(vn)
        mp, mn = nup * nvp, nun * nvn
        if mp >= mn:
            if mp == 0:
                continue
            uu, vv, mass = up / nup, vp / nvp, mp
        else:
            uu, vv, mass = un / nun, vn / nvn, mn
        W[:, i] = np.sqrt(sigma * mass) * uu
        H[i] = np.sqrt(sigma * mass) * vv
    return W, H


def _objective(M, Q, S):
    R = M - Q @ S @ Q.T
    return float(np.sum(R * R))


def _mu_step(F, num, den, M, objective, current, exponent=0.5, max_halvings=30):
    """Multiplicative step ``F * (num/den)**exponent`` with exponent backtracking.

    The first try is the plain square-root rule.  If it raises the
    objective the exponent is halved until it does not; if that never
    happens the factor is left unchanged.
    """
    ratio = num / (den + DENOM_GUARD)
    e = exponent
    for tries in range(max_halvings + 1):
        cand = F * ratio ** e
        val = objective(cand)
        if val <= current:
            return cand, val, tries
        e *= 0.5
    return F, current, max_halvings + 1


def nmf_consensus(partitions, r: int, max_iter: int = 500, tol: float = 1e-12):
    """Symmetric tri-factorisation of the mean connectivity matrix.

    Returns ``(factors, U)`` where ``U = Q S Q^T``.
    """
    run = _as_run(partitions)
    T = run.T
    if r < 1 or r > T:
        raise ValueError(f"rank r={r} must lie in [1, T={T}]")
    Mt = _co_counts(run.label_matrix()) / run.M

    W, H = nndsvd(Mt, r)
    nrm = np.linalg.norm(W, axis=0)
    Q = W / np.where(nrm > 0, nrm, 1.0)
    S = np.diag(nrm * np.linalg.norm(H, axis=1))
    Q[Q == 0] = NNDSVD_FILL
    S[S == 0] = NNDSVD_FILL

    obj = _objective(Mt, Q, S)
    trace = [obj]
    backtracks = 0
    for _ in range(max_iter):
        MQ = Mt @ Q
        num_q = MQ @ S
        den_q = Q @ (Q.T @ num_q)
        Q, obj_q, bq = _mu_step(Q, num_q, den_q, Mt, lambda F: _objective(Mt, F, S), obj)
        QtQ = Q.T @ Q
        num_s = Q.T @ Mt @ Q
        den_s = QtQ @ S @ QtQ
        S, obj_s, bs = _mu_step(S, num_s, den_s, Mt, lambda F: _objective(Mt, Q, F), obj_q)
        backtracks += bq + bs
        if not np.isfinite(obj_s) or not (np.all(np.isfinite(Q)) and np.all(np.isfinite(S))):
            raise FloatingPointError("update diverged")
        assert obj_s <= obj + 1e-9, "NMF objective increased"
        assert Q.min() >= 0 and S.min() >= 0
        trace.append(obj_s)
        improved = obj - obj_s
        obj = obj_s
        if improved < tol:
            break
    factors = NmfFactors(Q, S, trace, backtracks)
    return factors, ConsensusMatrix(Q @ S @ Q.T, "nmf_u")


def pad_and_merge(cm: ConsensusMatrix, f: NmfFactors | None, source: str = "q_pad",
                  include_cm: bool = True) -> ConsensusMatrix:
    """Add the zero-padded ``Q`` (or ``U``) to ``cm`` and symmetrise.

    ``f=None`` skips the factorisation term; ``include_cm=False`` drops the
    co-association term.  These two switches give the single-route variants.
    """
    T = cm.T
    A = cm.data.copy() if include_cm else np.zeros((T, T))
    if f is not None:
        if source == "q_pad":
            Q = f.Q
            if Q.shape[0] != T or Q.shape[1] > T:
                raise ValueError(f"Q shape {Q.shape} does not fit a {T}x{T} matrix")
            A[:, :Q.shape[1]] += Q
        elif source == "u_matrix":
            U = f.Q @ f.S @ f.Q.T
            if U.shape != (T, T):
                raise ValueError("U shape does not match the co-association matrix")
            A += U
        else:
            raise ValueError(f"unknown merge source {source!r}")
    merged = 0.5 * (A + A.T)
    return ConsensusMatrix(merged, "merged")


def dump_matrix(mat, path) -> None:
    """Headerless CSV, 17 significant digits."""
    data = mat.data if isinstance(mat, ConsensusMatrix) else np.asarray(mat)
    with open(path, "w") as fh:
        for row in data:
            fh.write(",".join(format(float(x), ".17g") for x in row) + "\n")
