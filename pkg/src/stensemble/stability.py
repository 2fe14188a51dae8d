"""Stability of a clustering procedure across reseeded or subsampled runs.

Three comparisons are provided: optimal-transport alignment cost between
cluster masses (OTA), figure of merit over assigned-centroid distance
matrices (FoM) and the proportion of non-overlapping labels (APN).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .base_cluster import Partition, pairwise_dists
from .homo_ensemble import run_seed
from .ingest import FeatureMatrix


class StabilityError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"stability run {index} failed: {cause}")
        self.index = index
        self.cause = cause


# -- exact transportation problem ------------------------------------------


def _northwest_corner(supply, demand):
    m, n = len(supply), len(demand)
    s, d = supply.copy(), demand.copy()
    flow = np.zeros((m, n), dtype=np.int64)
    basis = []
    i = j = 0
    while True:
        x = min(s[i], d[j])
        flow[i, j] = x
        basis.append((i, j))
        s[i] -= x
        d[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if s[i] == 0 and i < m - 1:
            i += 1
        else:
            j += 1
    return flow, basis


def _potentials(cost, basis, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    by_row = [[] for _ in range(m)]
    by_col = [[] for _ in range(n)]
    for i, j in basis:
        by_row[i].append(j)
        by_col[j].append(i)
    queue = deque([("r", 0)])
    while queue:
        side, idx = queue.popleft()
        if side == "r":
            for j in by_row[idx]:
                if np.isnan(v[j]):
                    v[j] = cost[idx, j] - u[idx]
                    queue.append(("c", j))
        else:
            for i in by_col[idx]:
                if np.isnan(u[i]):
                    u[i] = cost[i, idx] - v[idx]
                    queue.append(("r", i))
    return u, v


def _tree_path(basis, m, n, start_row, end_col):
    """Basic cells on the tree path from row node ``start_row`` to column node ``end_col``."""
    adj = {}
    for i, j in basis:
        adj.setdefault(("r", i), []).append((("c", j), (i, j)))
        adj.setdefault(("c", j), []).append((("r", i), (i, j)))
    start, goal = ("r", start_row), ("c", end_col)
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt, cell in adj.get(node, []):
            if nxt not in prev:
                prev[nxt] = (node, cell)
                queue.append(nxt)
    cells = []
    node = goal
    while prev[node] is not None:
        node, cell = prev[node]
        cells.append(cell)
    return cells  # ordered from the column end back to the row end


def transport_plan(supply, demand, cost, max_pivots=10000):
    """Solve the balanced transportation problem with integer masses.

    ``supply`` and ``demand`` are non-negative integer vectors with equal
    sums.  Returns the integer flow matrix of an optimal plan.  Uses the
    transportation simplex (north-west corner start, u-v potentials,
    Bland's entering rule).
    """
    supply = np.asarray(supply, dtype=np.int64)
    demand = np.asarray(demand, dtype=np.int64)
    cost = np.asarray(cost, dtype=np.float64)
    if supply.sum() != demand.sum():
        raise ValueError("supply and demand totals differ")
    full = np.zeros((len(supply), len(demand)), dtype=np.int64)
    rows = np.flatnonzero(supply > 0)
    cols = np.flatnonzero(demand > 0)
    if rows.size == 0:
        return full
    c = cost[np.ix_(rows, cols)]
    m, n = c.shape
    flow, basis = _northwest_corner(supply[rows], demand[cols])
    eps = 1e-12 * max(1.0, float(np.abs(c).max()))
    for _ in range(max_pivots):
        u, v = _potentials(c, basis, m, n)
        reduced = c - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), dtype=bool)
        for cell in basis:
            in_basis[cell] = True
        cand = np.argwhere((reduced < -eps) & ~in_basis)
        if cand.size == 0:
            break
        ei, ej = (int(x) for x in cand[0])
        path = _tree_path(basis, m, n, ei, ej)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(flow[cell] for cell in minus)
        leaving = next(cell for cell in minus if flow[cell] == theta)
        for cell in minus:
            flow[cell] -= theta
        for cell in plus:
            flow[cell] += theta
        flow[ei, ej] += theta
        basis.remove(leaving)
        basis.append((ei, ej))
    else:
        raise RuntimeError("transportation simplex did not converge")
    full[np.ix_(rows, cols)] = flow
    return full


# -- cluster summaries --------------------------------------------------------


def _features(m):
    return m.data if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)


def _labels(p):
    return p.labels if isinstance(p, Partition) else np.asarray(p, dtype=np.int64)


def _k(p, labels):
    return p.k if isinstance(p, Partition) else int(labels.max()) + 1


def _cluster_means(X, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return means, counts


def ota_plan(m, p1, p2):
    """Optimal plan between the cluster-mass distributions of two partitions.

    Returns ``(cost, plan, mass1, mass2)``; the plan is in mass units.
    """
    X = _features(m)
    l1, l2 = _labels(p1), _labels(p2)
    if len(l1) != len(l2) or len(l1) != X.shape[0]:
        raise ValueError("partition lengths differ")
    k1, k2 = _k(p1, l1), _k(p2, l2)
    if k1 != k2:
        raise ValueError("cluster count mismatch")
    c1, n1 = _cluster_means(X, l1, k1)
    c2, n2 = _cluster_means(X, l2, k2)
    cost = pairwise_dists(c1, c2)
    cost[n1 == 0, :] = 0.0
    cost[:, n2 == 0] = 0.0
    flow = transport_plan(n1, n2, cost)
    total = len(l1)
    plan = flow / total
    return float((flow * cost).sum() / total), plan, n1 / total, n2 / total


def ota(m, p1, p2) -> float:
    """Minimal transport cost between the two clusterings' centroid masses."""
    return ota_plan(m, p1, p2)[0]


def _assigned_centroid_dists(X, labels, k):
    means, _ = _cluster_means(X, labels, k)
    cd = pairwise_dists(means)
    return cd[labels][:, labels]


def fom(m, p_base, p_pert) -> float:
    """Mean absolute difference of the two assigned-centroid distance matrices."""
    X = _features(m)
    lb, lp = _labels(p_base), _labels(p_pert)
    if len(lb) != len(lp):
        raise ValueError("partition lengths differ")
    Db = _assigned_centroid_dists(X, lb, _k(p_base, lb))
    Dp = _assigned_centroid_dists(X, lp, _k(p_pert, lp))
    n = len(lb)
    return float(np.abs(Db - Dp).sum() / (n * n))


def apn(p1, p2, align: bool = False) -> float:
    """Fraction of points whose labels differ; optionally after Hungarian relabelling."""
    l1, l2 = _labels(p1), _labels(p2)
    if len(l1) != len(l2):
        raise ValueError("partition lengths differ")
    if align:
        k1, k2 = _k(p1, l1), _k(p2, l2)
        if k1 != k2:
            raise ValueError("alignment requires equal cluster counts")
        table = np.zeros((k1, k2), dtype=np.int64)
        np.add.at(table, (l1, l2), 1)
        r, c = linear_sum_assignment(-table)
        mapping = np.empty(k2, dtype=np.int64)
        mapping[c] = r
        l2 = mapping[l2]
    return float(np.mean(l1 != l2))


# -- rerun harness ------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationPlan:
    mode: str = "reseed"
    runs: int = 20
    subsample_fraction: float = 0.9
    base_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("reseed", "subsample"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.runs < 2:
            raise ValueError("runs must be >= 2")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")


@dataclass
class StabilityReport:
    ota_mean: float
    fom_mean: float
    apn_mean: float
    per_run: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"ota": self.ota_mean, "fom": self.fom_mean, "apn": self.apn_mean,
                "per_run": self.per_run}


def _subsample(T, fraction, seed):
    rng = np.random.default_rng(seed)
    size = max(1, int(round(fraction * T)))
    return np.sort(rng.choice(T, size=size, replace=False))


def compare(m, p_base, p_pert, k=None) -> dict:
    """All three stability metrics for one base/perturbed pair."""
    kb = k if k is not None else max(_k(p_base, _labels(p_base)), _k(p_pert, _labels(p_pert)))
    pb = Partition(_labels(p_base), kb)
    pp = Partition(_labels(p_pert), kb)
    return {"ota": ota(m, pb, pp), "fom": fom(m, pb, pp), "apn": apn(pb, pp)}


def run_stability(pipeline, m: FeatureMatrix, plan: PerturbationPlan) -> StabilityReport:
    """Run ``pipeline(features, seed) -> Partition`` once as base and ``runs - 1`` times perturbed.

    Reseed mode changes only the seed.  Subsample mode keeps the base seed,
    drops rows, and compares on the retained indices.
    """
    try:
        base = pipeline(m, plan.base_seed)
    except Exception as exc:
        raise StabilityError(0, exc) from exc
    per_run = []
    for r in range(1, plan.runs):
        seed = run_seed(plan.base_seed, r)
        try:
            if plan.mode == "reseed":
                idx = np.arange(m.n_rows)
                pert = pipeline(m, seed)
            else:
                idx = _subsample(m.n_rows, plan.subsample_fraction, seed)
                pert = pipeline(m.take(idx), plan.base_seed)
        except Exception as exc:
            raise StabilityError(r, exc) from exc
        k = max(base.k, pert.k)
        row = compare(m.take(idx), base.labels[idx], pert.labels, k)
        row["run"] = r
        per_run.append(row)
    return StabilityReport(
        ota_mean=float(np.mean([x["ota"] for x in per_run])),
        fom_mean=float(np.mean([x["fom"] for x in per_run])),
        apn_mean=float(np.mean([x["apn"] for x in per_run])),
        per_run=per_run,
    )
